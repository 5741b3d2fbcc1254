//! The unified single-phase training loop: mixed teacher/student collection,
//! advantage estimation, minibatch updates on the combined objective,
//! learning-rate scheduling, curriculum bookkeeping, metrics and checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Scheduler};
use crate::env::{Done, ToyEnv};
use crate::error::{Result, UltError};
use crate::losses::compute_step_loss;
use crate::mixer::MixerState;
use crate::net::checkpoint::save_checkpoint;
use crate::net::{AdamW, Mode, UltNet};
use crate::rollout::{
    compute_gae, normalize_advantages, Provenance, RolloutStep, TrajectoryWindow,
};

/// Optional online supervised pull toward an external reference policy,
/// annealed to zero by the midpoint of training.
pub struct JointTransfer {
    pub oracle: crate::baselines::oracle::OraclePolicy,
    pub w0: f64,
}

/// Linear anneal from w0 at update 0 to zero at total/2, zero afterwards.
pub fn joint_weight(w0: f64, update: usize, total: usize) -> f64 {
    let half = total as f64 / 2.0;
    if half <= 0.0 {
        return 0.0;
    }
    (w0 * (1.0 - update as f64 / half)).max(0.0)
}

/// Desired-KL learning-rate rule: shrink above twice the target, grow below
/// half of it, always clamped.
pub fn adaptive_lr(lr: f64, approx_kl: f64, desired_kl: f64, lr_min: f64, lr_max: f64) -> f64 {
    let next = if approx_kl > 2.0 * desired_kl {
        lr / 1.5
    } else if approx_kl < desired_kl / 2.0 && approx_kl >= 0.0 {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(lr_min, lr_max)
}

/// Cosine decay from the initial rate to the final rate over the run.
pub fn cosine_lr(lr0: f64, lr_final: f64, update: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let u = (update as f64 / total as f64).min(1.0);
    lr_final + 0.5 * (lr0 - lr_final) * (1.0 + (std::f64::consts::PI * u).cos())
}

/// One metrics-log row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: usize,
    pub env_steps: u64,
    pub mean_reward: f64,
    pub lin_track: f64,
    pub ang_track: f64,
    pub l_n: f64,
    pub l_a: f64,
    pub l_rl: f64,
    pub approx_kl: f64,
    pub lr: f64,
    pub mean_curriculum_level: f64,
    pub teacher_fraction: f64,
    pub scheme: String,
}

pub const METRICS_HEADER: [&str; 13] = [
    "update",
    "env_steps",
    "mean_reward",
    "lin_track",
    "ang_track",
    "L_n",
    "L_a",
    "L_RL",
    "approx_kl",
    "lr",
    "mean_curriculum_level",
    "teacher_fraction",
    "scheme",
];

impl UpdateMetrics {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.update.to_string(),
            self.env_steps.to_string(),
            self.mean_reward.to_string(),
            self.lin_track.to_string(),
            self.ang_track.to_string(),
            self.l_n.to_string(),
            self.l_a.to_string(),
            self.l_rl.to_string(),
            self.approx_kl.to_string(),
            self.lr.to_string(),
            self.mean_curriculum_level.to_string(),
            self.teacher_fraction.to_string(),
            self.scheme.clone(),
        ]
    }
}

/// Append-only CSV metrics writer with the shared schema.
pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(File::create(path)?);
        writer
            .write_record(METRICS_HEADER)
            .map_err(|e| UltError::Report(format!("metrics header: {e}")))?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, row: &UpdateMetrics) -> Result<()> {
        self.writer
            .write_record(row.csv_row())
            .map_err(|e| UltError::Report(format!("metrics row: {e}")))?;
        self.writer
            .flush()
            .map_err(|e| UltError::Report(format!("metrics flush: {e}")))?;
        Ok(())
    }
}

/// Resumable full training state. Parameters and moments are stored as
/// 64-bit JSON numbers, so a resumed run continues bit-identically.
#[derive(Serialize, Deserialize)]
struct TrainerState {
    config: Config,
    scheme: String,
    params: BTreeMap<String, Vec<f64>>,
    opt: AdamW,
    envs: Vec<ToyEnv>,
    windows: Vec<TrajectoryWindow>,
    mixer: MixerState,
    rng: ChaCha8Rng,
    update_index: usize,
    env_steps: u64,
    lr: f64,
    incidents: u64,
}

pub struct Trainer {
    pub cfg: Config,
    pub net: UltNet,
    pub opt: AdamW,
    pub envs: Vec<ToyEnv>,
    windows: Vec<TrajectoryWindow>,
    mixer: MixerState,
    rng: ChaCha8Rng,
    pub update_index: usize,
    pub env_steps: u64,
    pub lr: f64,
    pub incidents: u64,
    pub scheme: String,
    /// Not serialized; joint-transfer runs are not resumable.
    pub joint: Option<JointTransfer>,
}

/// Per-env collected sequence, flattened after advantage estimation.
struct EnvTrace {
    steps: Vec<RolloutStep>,
}

impl Trainer {
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = UltNet::new(&cfg.net, seed);
        let opt = AdamW::new(cfg.train.learning_rate, cfg.train.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_c0de);
        let mut envs = Vec::with_capacity(cfg.train.agents);
        let mut windows = Vec::with_capacity(cfg.train.agents);
        for i in 0..cfg.train.agents {
            let mut env = ToyEnv::new(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
            let obs = env.reset(&cfg.env)?;
            let mut w =
                TrajectoryWindow::new(cfg.net.window, cfg.net.obs_dim, cfg.net.act_dim);
            w.push_reset(obs.to_vec());
            envs.push(env);
            windows.push(w);
        }
        let mixer = MixerState::new(cfg.train.agents, &cfg.mixer, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            net,
            opt,
            envs,
            windows,
            mixer,
            rng,
            update_index: 0,
            env_steps: 0,
            lr: cfg.train.learning_rate,
            incidents: 0,
            scheme: "ult".into(),
            joint: None,
        })
    }

    /// Whether rollouts and updates run the privilege path at all. Plain PPO
    /// (alpha = 0, lambda = 0, proprio critic) never touches it.
    pub fn uses_privilege(&self) -> bool {
        self.cfg.train.privileged_critic
            || self.cfg.mixer.alpha > 0.0
            || (self.cfg.losses.lambda > 0.0 && self.cfg.losses.beta > 0.0)
    }

    fn value_of(&self, tokens: &ndarray::Array2<f64>, privilege: Option<&[f64]>) -> Result<f64> {
        let (out, cache) = self.net.forward(tokens, privilege)?;
        if self.cfg.train.privileged_critic {
            out.value
                .ok_or_else(|| UltError::Internal("privileged critic without privilege".into()))
        } else {
            Ok(self.net.value_from_proprio(&cache)?.0)
        }
    }

    /// Collect one horizon from all envs with mixed actions, then compute
    /// advantages. Returns the flattened batch and rollout statistics.
    fn collect(&mut self) -> Result<(Vec<RolloutStep>, CollectStats)> {
        let horizon = self.cfg.train.horizon;
        let agents = self.cfg.train.agents;
        let use_priv = self.uses_privilege();
        let mut traces: Vec<EnvTrace> = (0..agents)
            .map(|_| EnvTrace { steps: Vec::with_capacity(horizon) })
            .collect();
        let mut stats = CollectStats::default();

        for _ in 0..horizon {
            for a in 0..agents {
                let tokens = self.windows[a].tokens();
                let privilege = self.envs[a].privilege(&self.cfg.env).to_vec();
                let priv_opt = if use_priv { Some(privilege.as_slice()) } else { None };
                let (out, cache) = self.net.forward(&tokens, priv_opt)?;
                let value = if self.cfg.train.privileged_critic {
                    out.value.ok_or_else(|| {
                        UltError::Internal("privileged critic without privilege".into())
                    })?
                } else {
                    self.net.value_from_proprio(&cache)?.0
                };
                let provenance = if use_priv && self.cfg.mixer.alpha > 0.0 {
                    self.mixer.provenance(a, &self.cfg.mixer)
                } else {
                    Provenance::Student
                };
                let (mean, log_std) = match provenance {
                    Provenance::Teacher => (
                        out.teacher_mean.clone().expect("teacher head"),
                        self.net.teacher_log_std()?,
                    ),
                    Provenance::Student => {
                        (out.student_mean.clone(), self.net.student_log_std())
                    }
                };
                let action = crate::net::gaussian_sample(&mean, &log_std, &mut self.rng);
                let logp = crate::net::gaussian_log_prob(&mean, &log_std, &action);
                let act_arr: [f64; 4] = [action[0], action[1], action[2], action[3]];
                let outcome = self.envs[a].step(act_arr, &self.cfg.env)?;

                stats.reward_sum += outcome.reward.total;
                stats.lin_sum += outcome.reward.lin_tracking_weighted();
                stats.ang_sum += outcome.reward.ang_tracking_weighted();
                if provenance == Provenance::Teacher {
                    stats.teacher_steps += 1;
                }
                stats.steps += 1;

                let mut reward = outcome.reward.total;
                let (done, next_token) = match outcome.done {
                    Done::Running => {
                        let next = crate::rollout::tokenize(
                            &outcome.proprio.to_vec(),
                            action.as_slice().unwrap(),
                            self.cfg.net.obs_dim,
                            self.cfg.net.act_dim,
                        )?;
                        (false, Some(next))
                    }
                    Done::Timeout => {
                        // the episode was cut, not failed: bootstrap through
                        // the terminal state
                        let mut w = self.windows[a].clone();
                        w.push(outcome.proprio.to_vec(), action.to_vec());
                        let p = self.envs[a].privilege(&self.cfg.env).to_vec();
                        let p_opt = if use_priv { Some(p.as_slice()) } else { None };
                        let v_next = self.value_of(&w.tokens(), p_opt)?;
                        reward += self.cfg.train.gamma * v_next;
                        (true, None)
                    }
                    Done::Collision => (true, None),
                };

                traces[a].steps.push(RolloutStep {
                    tokens,
                    privilege,
                    action: action.to_vec(),
                    provenance,
                    behavior_logp: logp,
                    value,
                    reward,
                    done,
                    advantage: 0.0,
                    return_target: 0.0,
                    next_token,
                });

                if done {
                    self.envs[a].update_curriculum(&self.cfg.env);
                    let obs = self.envs[a].reset(&self.cfg.env)?;
                    self.windows[a].push_reset(obs.to_vec());
                } else {
                    self.windows[a].push(outcome.proprio.to_vec(), action.to_vec());
                }
            }
            self.mixer.step(&self.cfg.mixer, &mut self.rng);
        }

        // bootstrap tails and advantage estimation per env
        let mut batch = Vec::with_capacity(agents * horizon);
        for a in 0..agents {
            let tokens = self.windows[a].tokens();
            let privilege = self.envs[a].privilege(&self.cfg.env).to_vec();
            let p_opt = if use_priv { Some(privilege.as_slice()) } else { None };
            let tail = self.value_of(&tokens, p_opt)?;
            let trace = &mut traces[a];
            let rewards: Vec<f64> = trace.steps.iter().map(|s| s.reward).collect();
            let mut values: Vec<f64> = trace.steps.iter().map(|s| s.value).collect();
            values.push(tail);
            let dones: Vec<bool> = trace.steps.iter().map(|s| s.done).collect();
            let (adv, ret) = compute_gae(
                &rewards,
                &values,
                &dones,
                self.cfg.train.gamma,
                self.cfg.train.gae_lambda,
            );
            for (step, (a_k, r_k)) in trace.steps.iter_mut().zip(adv.iter().zip(ret.iter())) {
                step.advantage = *a_k;
                step.return_target = *r_k;
            }
            batch.append(&mut trace.steps);
        }
        let mut advs: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
        normalize_advantages(&mut advs);
        for (s, a) in batch.iter_mut().zip(advs.iter()) {
            s.advantage = *a;
        }
        self.env_steps += (agents * horizon) as u64;
        Ok((batch, stats))
    }

    fn snapshot_params(&mut self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        self.net.visit_params(&mut |name, mut p| {
            out.insert(name.to_string(), p.value_slice().to_vec());
        });
        out
    }

    fn restore_params(&mut self, snap: &BTreeMap<String, Vec<f64>>) {
        self.net.visit_params(&mut |name, mut p| {
            if let Some(v) = snap.get(name) {
                p.value_slice().copy_from_slice(v);
            }
        });
    }

    /// Run one full update (collect + optimize) and return its metrics row.
    pub fn run_update(&mut self) -> Result<UpdateMetrics> {
        if self.cfg.train.scheduler == Scheduler::Cosine {
            self.lr = cosine_lr(
                self.cfg.train.learning_rate,
                self.cfg.train.cosine_final_lr,
                self.update_index,
                self.cfg.train.total_updates,
            );
        }
        let update_at_collection = self.update_index;
        let (mut batch, stats) = self.collect()?;
        let use_priv = self.uses_privilege();
        let joint_w = self
            .joint
            .as_ref()
            .map(|j| joint_weight(j.w0, update_at_collection, self.cfg.train.total_updates))
            .unwrap_or(0.0);

        let param_snap = self.snapshot_params();
        let opt_snap = self.opt.clone();
        let mb = self.cfg.train.minibatch.min(batch.len());
        let inv_mb = 1.0 / mb as f64;
        let mut order: Vec<usize> = (0..batch.len()).collect();

        let mut sums = LossSums::default();
        let mut aborted = false;
        'epochs: for _ in 0..self.cfg.train.mini_epochs {
            // in-place shuffle driven by the trainer generator
            for i in (1..order.len()).rev() {
                let j = self.rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(mb) {
                if chunk.len() < mb {
                    continue;
                }
                self.net.zero_grad();
                let mut d_ls_student: Array1<f64> = Array1::zeros(self.cfg.net.act_dim);
                let mut d_ls_teacher: Array1<f64> = Array1::zeros(self.cfg.net.act_dim);
                let mut kl_sum = 0.0;
                let mut mb_finite = true;
                for &idx in chunk {
                    let step = &batch[idx];
                    let p_opt = if use_priv { Some(step.privilege.as_slice()) } else { None };
                    let (out, cache) = self.net.forward(&step.tokens, p_opt)?;
                    let (value, proprio_vc) = if self.cfg.train.privileged_critic {
                        (out.value.expect("privileged value"), None)
                    } else {
                        let (v, c) = self.net.value_from_proprio(&cache)?;
                        (v, Some(c))
                    };
                    let teacher_ls = if use_priv {
                        self.net.teacher_log_std()?
                    } else {
                        self.net.student_log_std()
                    };
                    let (losses, grads) = compute_step_loss(
                        &out,
                        value,
                        step,
                        &self.net.student_log_std(),
                        &teacher_ls,
                        &self.cfg.losses,
                        &step.tokens,
                    );
                    if !losses.total.is_finite() {
                        mb_finite = false;
                        break;
                    }
                    sums.add(&losses);
                    kl_sum += losses.approx_kl;

                    let mut og = grads.output;
                    if joint_w > 0.0 {
                        let j = self.joint.as_ref().expect("joint transfer");
                        let m = self.cfg.net.obs_dim;
                        let n = self.cfg.net.act_dim;
                        let t = step.tokens.nrows();
                        let obs: Vec<f64> =
                            step.tokens.row(t - 1).iter().take(m).copied().collect();
                        let label = j.oracle.mean_action(&obs, &step.privilege)?;
                        let diff = &out.student_mean - &label;
                        sums.imitation += joint_w * diff.iter().map(|v| v * v).sum::<f64>();
                        let dz = og.d_zhat.get_or_insert_with(|| {
                            ndarray::Array2::zeros((t, self.cfg.net.token_dim()))
                        });
                        let mut slice = dz.slice_mut(ndarray::s![t - 1, m..m + n]);
                        for k in 0..n {
                            slice[k] += joint_w * 2.0 * diff[k];
                        }
                    }
                    if let Some(dz) = og.d_zhat.as_mut() {
                        dz.mapv_inplace(|v| v * inv_mb);
                    }
                    if let Some(dt) = og.d_teacher.as_mut() {
                        dt.mapv_inplace(|v| v * inv_mb);
                    }
                    let d_value = grads.d_value * inv_mb;
                    match proprio_vc.as_ref() {
                        Some(vc) => {
                            self.net.backward_with_proprio_value(&cache, &og, Some((d_value, vc)));
                        }
                        None => {
                            og.d_value = Some(d_value);
                            self.net.backward(&cache, &og);
                        }
                    }
                    d_ls_student.scaled_add(inv_mb, &grads.d_log_std_student);
                    d_ls_teacher.scaled_add(inv_mb, &grads.d_log_std_teacher);
                }
                if !mb_finite {
                    self.restore_params(&param_snap);
                    self.opt = opt_snap.clone();
                    self.lr = (self.lr * 0.5).max(self.cfg.train.lr_min);
                    self.incidents += 1;
                    aborted = true;
                    break 'epochs;
                }
                self.net.visit_params(&mut |name, mut p| {
                    let extra = match name {
                        "log_std_student" => Some(&d_ls_student),
                        "log_std_teacher" => Some(&d_ls_teacher),
                        _ => None,
                    };
                    if let Some(extra) = extra {
                        for (g, e) in p.grad_slice().iter_mut().zip(extra.iter()) {
                            *g += e;
                        }
                    }
                });
                if self.cfg.train.scheduler == Scheduler::AdaptiveKl {
                    self.lr = adaptive_lr(
                        self.lr,
                        kl_sum / mb as f64,
                        self.cfg.train.desired_kl,
                        self.cfg.train.lr_min,
                        self.cfg.train.lr_max,
                    );
                }
                self.opt.lr = self.lr;
                self.opt.step(&mut self.net);
            }
        }
        batch.clear();

        self.update_index += 1;
        let count = sums.count.max(1) as f64;
        Ok(UpdateMetrics {
            update: self.update_index,
            env_steps: self.env_steps,
            mean_reward: stats.reward_sum / stats.steps.max(1) as f64,
            lin_track: stats.lin_sum / stats.steps.max(1) as f64,
            ang_track: stats.ang_sum / stats.steps.max(1) as f64,
            l_n: sums.next_pred / count,
            l_a: sums.imitation / count,
            l_rl: sums.l_rl / count,
            approx_kl: if aborted { f64::NAN } else { sums.approx_kl / count },
            lr: self.lr,
            mean_curriculum_level: self.envs.iter().map(|e| e.level as f64).sum::<f64>()
                / self.envs.len() as f64,
            teacher_fraction: stats.teacher_steps as f64 / stats.steps.max(1) as f64,
            scheme: self.scheme.clone(),
        })
    }

    /// Full run: updates until the configured total, with periodic
    /// checkpoints and an append-only metrics log under `out_dir`.
    pub fn train(&mut self, out_dir: &Path) -> Result<Vec<UpdateMetrics>> {
        std::fs::create_dir_all(out_dir)?;
        let mut log = MetricsLog::create(&out_dir.join("metrics.csv"))?;
        let mut rows = Vec::new();
        while self.update_index < self.cfg.train.total_updates {
            let row = self.run_update()?;
            log.append(&row)?;
            rows.push(row);
            let at_end = self.update_index == self.cfg.train.total_updates;
            if self.update_index % self.cfg.train.checkpoint_interval == 0 || at_end {
                self.save_checkpoint_pair(out_dir)?;
            }
        }
        Ok(rows)
    }

    fn save_checkpoint_pair(&mut self, out_dir: &Path) -> Result<()> {
        let stem = format!("ckpt_{:05}", self.update_index);
        save_checkpoint(&mut self.net, &out_dir.join(format!("{stem}.ultc")), false)?;
        self.save_state(&out_dir.join(format!("{stem}.state.json")))?;
        // stable names for the latest artifacts
        save_checkpoint(&mut self.net, &out_dir.join("latest.ultc"), false)?;
        self.save_state(&out_dir.join("latest.state.json"))?;
        Ok(())
    }

    /// Serialize the complete training state for bit-identical resume.
    pub fn save_state(&mut self, path: &Path) -> Result<()> {
        let state = TrainerState {
            config: self.cfg.clone(),
            scheme: self.scheme.clone(),
            params: self.snapshot_params(),
            opt: self.opt.clone(),
            envs: self.envs.clone(),
            windows: self.windows.clone(),
            mixer: self.mixer.clone(),
            rng: self.rng.clone(),
            update_index: self.update_index,
            env_steps: self.env_steps,
            lr: self.lr,
            incidents: self.incidents,
        };
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, &state)
            .map_err(|e| UltError::Checkpoint(format!("state encode: {e}")))?;
        Ok(())
    }

    pub fn load_state(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let state: TrainerState = serde_json::from_reader(r)
            .map_err(|e| UltError::Checkpoint(format!("state decode: {e}")))?;
        let mut net = UltNet::new(&state.config.net, 0);
        let mut missing = Vec::new();
        net.visit_params(&mut |name, mut p| match state.params.get(name) {
            Some(v) if v.len() == p.value_slice().len() => {
                p.value_slice().copy_from_slice(v);
            }
            _ => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(UltError::Checkpoint(format!(
                "{}: missing/mismatched parameters: {}",
                path.display(),
                missing.join(", ")
            )));
        }
        Ok(Self {
            cfg: state.config,
            net,
            opt: state.opt,
            envs: state.envs,
            windows: state.windows,
            mixer: state.mixer,
            rng: state.rng,
            update_index: state.update_index,
            env_steps: state.env_steps,
            lr: state.lr,
            incidents: state.incidents,
            scheme: state.scheme,
            joint: None,
        })
    }

    /// Deterministic student/teacher mean action for external labeling.
    pub fn student_mean_action(
        &self,
        window: &TrajectoryWindow,
    ) -> Result<Array1<f64>> {
        let out = self
            .net
            .act::<ChaCha8Rng>(&window.tokens(), None, Mode::Deploy, false, None)?;
        Ok(out.action)
    }
}

#[derive(Default)]
struct CollectStats {
    reward_sum: f64,
    lin_sum: f64,
    ang_sum: f64,
    teacher_steps: usize,
    steps: usize,
}

#[derive(Default)]
struct LossSums {
    next_pred: f64,
    imitation: f64,
    l_rl: f64,
    approx_kl: f64,
    count: usize,
}

impl LossSums {
    fn add(&mut self, l: &crate::losses::StepLosses) {
        self.next_pred += l.next_pred;
        self.imitation += l.imitation;
        self.l_rl += l.l_rl;
        self.approx_kl += l.approx_kl;
        self.count += 1;
    }
}

/// Load the metrics CSV produced by `train` back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<UpdateMetrics>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| UltError::Report(format!("metrics open: {e}")))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| UltError::Report(format!("metrics read: {e}")))?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(UltError::Report(format!(
                "{}: expected {} columns, found {}",
                path.display(),
                METRICS_HEADER.len(),
                rec.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|e| UltError::Report(format!("metrics field {i}: {e}")))
        };
        rows.push(UpdateMetrics {
            update: rec[0]
                .parse()
                .map_err(|e| UltError::Report(format!("metrics update: {e}")))?,
            env_steps: rec[1]
                .parse()
                .map_err(|e| UltError::Report(format!("metrics env_steps: {e}")))?,
            mean_reward: f(2)?,
            lin_track: f(3)?,
            ang_track: f(4)?,
            l_n: f(5)?,
            l_a: f(6)?,
            l_rl: f(7)?,
            approx_kl: f(8)?,
            lr: f(9)?,
            mean_curriculum_level: f(10)?,
            teacher_fraction: f(11)?,
            scheme: rec[12].to_string(),
        });
    }
    Ok(rows)
}

/// Checkpoint file paths for a finished run directory.
pub fn latest_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("latest.ultc")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_rule_arithmetic() {
        // inside the band: unchanged
        assert_eq!(adaptive_lr(3e-3, 0.008, 0.008, 1e-6, 1e-2), 3e-3);
        // above twice the target: divided by 1.5
        assert!((adaptive_lr(3e-3, 0.02, 0.008, 1e-6, 1e-2) - 2e-3).abs() < 1e-12);
        // below half the target: multiplied by 1.5
        assert!((adaptive_lr(3e-3, 0.003, 0.008, 1e-6, 1e-2) - 4.5e-3).abs() < 1e-12);
        // clamped
        assert_eq!(adaptive_lr(1e-2, 0.001, 0.008, 1e-6, 1e-2), 1e-2);
        assert_eq!(adaptive_lr(1.2e-6, 0.5, 0.008, 1e-6, 1e-2), 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(3e-3, 3e-5, 0, 100) - 3e-3).abs() < 1e-15);
        assert!((cosine_lr(3e-3, 3e-5, 100, 100) - 3e-5).abs() < 1e-12);
        let mid = cosine_lr(3e-3, 3e-5, 50, 100);
        assert!((mid - (3e-5 + 0.5 * (3e-3 - 3e-5))).abs() < 1e-12);
    }

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.net.embed_dim = 16;
        cfg.net.layers = 1;
        cfg.net.heads = 2;
        cfg.net.ff_dim = 32;
        cfg.net.window = 4;
        cfg.net.priv_hidden = [16, 16];
        cfg.net.teacher_hidden = [16, 16];
        cfg.net.value_hidden = 16;
        cfg.train.agents = 4;
        cfg.train.horizon = 6;
        cfg.train.minibatch = 12;
        cfg.train.mini_epochs = 2;
        cfg.train.total_updates = 2;
        cfg.train.checkpoint_interval = 1;
        cfg.env.episode_s = 2.0;
        cfg
    }

    #[test]
    fn one_update_produces_finite_metrics() {
        let cfg = small_config();
        let mut t = Trainer::new(&cfg, 3).unwrap();
        let row = t.run_update().unwrap();
        assert_eq!(row.update, 1);
        assert_eq!(row.env_steps, 24);
        assert!(row.mean_reward.is_finite());
        assert!(row.l_n.is_finite() && row.l_a.is_finite() && row.l_rl.is_finite());
        assert!(row.approx_kl.is_finite());
        assert!(row.teacher_fraction >= 0.0 && row.teacher_fraction <= 1.0);
    }

    #[test]
    fn equal_seeds_equal_metrics() {
        let cfg = small_config();
        let mut a = Trainer::new(&cfg, 11).unwrap();
        let mut b = Trainer::new(&cfg, 11).unwrap();
        for _ in 0..2 {
            let ra = a.run_update().unwrap();
            let rb = b.run_update().unwrap();
            assert_eq!(ra.csv_row(), rb.csv_row());
        }
    }

    #[test]
    fn vanilla_ppo_mode_never_reads_privilege() {
        let mut cfg = small_config();
        cfg.mixer.alpha = 0.0;
        cfg.losses.lambda = 0.0;
        cfg.train.privileged_critic = false;
        let mut t = Trainer::new(&cfg, 5).unwrap();
        assert!(!t.uses_privilege());
        let row = t.run_update().unwrap();
        assert_eq!(row.teacher_fraction, 0.0);
        assert_eq!(row.l_a, 0.0);
    }

    #[test]
    fn resume_continues_bit_identically() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();

        let mut straight = Trainer::new(&cfg, 9).unwrap();
        let r1 = straight.run_update().unwrap();
        let state_path = dir.path().join("mid.state.json");
        straight.save_state(&state_path).unwrap();
        let r2 = straight.run_update().unwrap();

        let mut resumed = Trainer::load_state(&state_path).unwrap();
        assert_eq!(resumed.update_index, 1);
        let r2b = resumed.run_update().unwrap();
        assert_eq!(r2.csv_row(), r2b.csv_row());
        let _ = r1;
    }

    #[test]
    fn behavior_logp_reproducible_from_stored_window() {
        let cfg = small_config();
        let mut t = Trainer::new(&cfg, 21).unwrap();
        let (batch, _) = t.collect().unwrap();
        for step in batch.iter().take(8) {
            let (out, _) = t.net.forward(&step.tokens, Some(step.privilege.as_slice())).unwrap();
            let (mean, ls) = match step.provenance {
                Provenance::Teacher => {
                    (out.teacher_mean.unwrap(), t.net.teacher_log_std().unwrap())
                }
                Provenance::Student => (out.student_mean, t.net.student_log_std()),
            };
            let lp = crate::net::gaussian_log_prob(&mean, &ls, &Array1::from(step.action.clone()));
            assert!((lp - step.behavior_logp).abs() < 1e-6);
        }
    }

    #[test]
    fn metrics_csv_round_trip() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&cfg, 2).unwrap();
        let rows = t.train(dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        let read = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(read.len(), 2);
        for (a, b) in rows.iter().zip(read.iter()) {
            assert_eq!(a.csv_row(), b.csv_row());
        }
        assert!(latest_checkpoint(dir.path()).exists());
    }

    #[test]
    fn curriculum_levels_move_at_most_one_per_update() {
        let cfg = small_config();
        let mut t = Trainer::new(&cfg, 7).unwrap();
        for _ in 0..3 {
            let before: Vec<usize> = t.envs.iter().map(|e| e.level).collect();
            t.run_update().unwrap();
            for (b, e) in before.iter().zip(t.envs.iter()) {
                let diff = (*b as i64 - e.level as i64).abs();
                assert!(diff <= 1, "level moved by {diff}");
            }
        }
    }
}
