//! Comparison ladder: supervised distillation from the reference policy
//! (offline, online, two-stage), joint RL + supervised transfer, plain PPO,
//! and post-hoc transfer from an all-teacher unified model.

pub mod oracle;

use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::env::ToyEnv;
use crate::error::{Result, UltError};
use crate::net::{gaussian_sample, AdamW, OutputGrads, UltNet};
use crate::rollout::TrajectoryWindow;
use crate::trainer::{JointTransfer, MetricsLog, Trainer, UpdateMetrics};

pub use oracle::{train_oracle, OraclePolicy};

/// One labeled sample: a trajectory window and the expert's mean action for
/// its final state.
pub struct DistillSample {
    pub tokens: Array2<f64>,
    pub label: Array1<f64>,
}

pub struct DistillDataset {
    pub samples: Vec<DistillSample>,
    /// "teacher-rollout" or "student-rollout".
    pub source: &'static str,
}

/// Roll the expert in the environment and label every visited state with its
/// own mean action.
fn collect_teacher_rollouts(
    oracle: &OraclePolicy,
    cfg: &Config,
    budget_steps: usize,
    rng: &mut ChaCha8Rng,
    env: &mut ToyEnv,
    window: &mut TrajectoryWindow,
) -> Result<DistillDataset> {
    let mut samples = Vec::with_capacity(budget_steps);
    let mut obs = env.reset(&cfg.env)?.to_vec();
    window.push_reset(obs.clone());
    for _ in 0..budget_steps {
        let privilege = env.privilege(&cfg.env).to_vec();
        let mean = oracle.mean_action(&obs, &privilege)?;
        let action = gaussian_sample(&mean, &oracle.log_std.v, rng);
        samples.push(DistillSample { tokens: window.tokens(), label: mean });
        let act_arr = [action[0], action[1], action[2], action[3]];
        let outcome = env.step(act_arr, &cfg.env)?;
        if matches!(outcome.done, crate::env::Done::Running) {
            obs = outcome.proprio.to_vec();
            window.push(obs.clone(), action.to_vec());
        } else {
            env.update_curriculum(&cfg.env);
            obs = env.reset(&cfg.env)?.to_vec();
            window.push_reset(obs.clone());
        }
    }
    Ok(DistillDataset { samples, source: "teacher-rollout" })
}

/// Roll the student and have the expert label each visited state.
fn collect_student_rollouts(
    student: &UltNet,
    oracle: &OraclePolicy,
    cfg: &Config,
    budget_steps: usize,
    rng: &mut ChaCha8Rng,
    env: &mut ToyEnv,
    window: &mut TrajectoryWindow,
) -> Result<DistillDataset> {
    let mut samples = Vec::with_capacity(budget_steps);
    let mut obs = env.reset(&cfg.env)?.to_vec();
    window.push_reset(obs.clone());
    for _ in 0..budget_steps {
        let privilege = env.privilege(&cfg.env).to_vec();
        let label = oracle.mean_action(&obs, &privilege)?;
        let tokens = window.tokens();
        let (out, _) = student.forward(&tokens, None)?;
        let action = gaussian_sample(&out.student_mean, &student.student_log_std(), rng);
        samples.push(DistillSample { tokens, label });
        let act_arr = [action[0], action[1], action[2], action[3]];
        let outcome = env.step(act_arr, &cfg.env)?;
        if matches!(outcome.done, crate::env::Done::Running) {
            obs = outcome.proprio.to_vec();
            window.push(obs.clone(), action.to_vec());
        } else {
            env.update_curriculum(&cfg.env);
            obs = env.reset(&cfg.env)?.to_vec();
            window.push_reset(obs.clone());
        }
    }
    Ok(DistillDataset { samples, source: "student-rollout" })
}

/// One pass of squared-error regression of the student mean onto the labels.
/// Returns the epoch-average loss.
fn regression_epoch(
    student: &mut UltNet,
    opt: &mut AdamW,
    dataset: &DistillDataset,
    minibatch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n_act = student.cfg.act_dim;
    let m = student.cfg.obs_dim;
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mb = minibatch.min(order.len().max(1));
    let inv_mb = 1.0 / mb as f64;
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for chunk in order.chunks(mb) {
        student.zero_grad();
        for &idx in chunk {
            let sample = &dataset.samples[idx];
            let (out, cache) = student.forward(&sample.tokens, None)?;
            let diff = &out.student_mean - &sample.label;
            loss_sum += diff.iter().map(|v| v * v).sum::<f64>();
            count += 1;
            let t = sample.tokens.nrows();
            let mut d_zhat = Array2::zeros((t, student.cfg.token_dim()));
            {
                let mut slice = d_zhat.slice_mut(s![t - 1, m..m + n_act]);
                for k in 0..n_act {
                    slice[k] = 2.0 * diff[k] * inv_mb;
                }
            }
            let grads = OutputGrads { d_zhat: Some(d_zhat), d_teacher: None, d_value: None };
            student.backward(&cache, &grads);
        }
        opt.step(student);
    }
    Ok(loss_sum / count.max(1) as f64)
}

fn distill_metrics_row(
    update: usize,
    env_steps: u64,
    loss: f64,
    scheme: &str,
) -> UpdateMetrics {
    UpdateMetrics {
        update,
        env_steps,
        mean_reward: 0.0,
        lin_track: 0.0,
        ang_track: 0.0,
        l_n: 0.0,
        l_a: loss,
        l_rl: 0.0,
        approx_kl: 0.0,
        lr: 0.0,
        mean_curriculum_level: 0.0,
        teacher_fraction: 0.0,
        scheme: scheme.into(),
    }
}

/// Shared knobs for the supervised schemes.
pub struct DistillConfig {
    /// Env steps gathered per round.
    pub round_steps: usize,
    /// Regression epochs per round.
    pub epochs_per_round: usize,
    pub minibatch: usize,
}

impl DistillConfig {
    pub fn from_train(cfg: &Config) -> Self {
        Self {
            round_steps: (cfg.train.agents * cfg.train.horizon).max(1),
            epochs_per_round: cfg.train.mini_epochs,
            minibatch: cfg.train.minibatch,
        }
    }
}

/// Expert generates every trajectory; the student never acts (single-stage
/// behavior cloning).
pub fn distill_offline(
    oracle: &OraclePolicy,
    student: &mut UltNet,
    cfg: &Config,
    budget_steps: usize,
    seed: u64,
    scheme: &str,
) -> Result<Vec<UpdateMetrics>> {
    let dc = DistillConfig::from_train(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ff1_13e);
    let mut env = ToyEnv::new(seed.wrapping_add(0xd15));
    let mut window = TrajectoryWindow::new(cfg.net.window, cfg.net.obs_dim, cfg.net.act_dim);
    let mut opt = AdamW::new(cfg.train.learning_rate, cfg.train.weight_decay);
    let mut rows = Vec::new();
    let mut env_steps = 0u64;
    let mut update = 0usize;
    let mut remaining = budget_steps;
    while remaining > 0 {
        let take = dc.round_steps.min(remaining);
        remaining -= take;
        let dataset =
            collect_teacher_rollouts(oracle, cfg, take, &mut rng, &mut env, &mut window)?;
        env_steps += take as u64;
        for _ in 0..dc.epochs_per_round {
            let loss = regression_epoch(student, &mut opt, &dataset, dc.minibatch, &mut rng)?;
            update += 1;
            rows.push(distill_metrics_row(update, env_steps, loss, scheme));
        }
    }
    Ok(rows)
}

/// The student generates every trajectory; the expert labels visited states
/// and datasets aggregate across rounds (the DAgger recipe).
pub fn distill_online(
    oracle: &OraclePolicy,
    student: &mut UltNet,
    cfg: &Config,
    budget_steps: usize,
    seed: u64,
    scheme: &str,
) -> Result<Vec<UpdateMetrics>> {
    let dc = DistillConfig::from_train(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a11_13e);
    let mut env = ToyEnv::new(seed.wrapping_add(0xda6));
    let mut window = TrajectoryWindow::new(cfg.net.window, cfg.net.obs_dim, cfg.net.act_dim);
    let mut opt = AdamW::new(cfg.train.learning_rate, cfg.train.weight_decay);
    let mut aggregate = DistillDataset { samples: Vec::new(), source: "student-rollout" };
    let mut rows = Vec::new();
    let mut env_steps = 0u64;
    let mut update = 0usize;
    let mut remaining = budget_steps;
    while remaining > 0 {
        let take = dc.round_steps.min(remaining);
        remaining -= take;
        let mut round =
            collect_student_rollouts(student, oracle, cfg, take, &mut rng, &mut env, &mut window)?;
        aggregate.samples.append(&mut round.samples);
        env_steps += take as u64;
        for _ in 0..dc.epochs_per_round {
            let loss = regression_epoch(student, &mut opt, &aggregate, dc.minibatch, &mut rng)?;
            update += 1;
            rows.push(distill_metrics_row(update, env_steps, loss, scheme));
        }
    }
    Ok(rows)
}

/// Offline pre-training followed by online correction; the boundary is a
/// marker row in the metrics.
pub fn distill_two_stage(
    oracle: &OraclePolicy,
    student: &mut UltNet,
    cfg: &Config,
    budgets: (usize, usize),
    seed: u64,
) -> Result<Vec<UpdateMetrics>> {
    let mut rows = distill_offline(oracle, student, cfg, budgets.0, seed, "two-stage:offline")?;
    let env_steps = rows.last().map(|r| r.env_steps).unwrap_or(0);
    rows.push(distill_metrics_row(
        rows.len() + 1,
        env_steps,
        0.0,
        "two-stage:boundary",
    ));
    let online = distill_online(oracle, student, cfg, budgets.1, seed, "two-stage:online")?;
    let base_update = rows.len();
    for (i, mut r) in online.into_iter().enumerate() {
        r.update = base_update + i + 1;
        r.env_steps += env_steps;
        rows.push(r);
    }
    Ok(rows)
}

/// Student PPO with an annealed supervised pull toward the expert: weight
/// starts at w0 and reaches zero at the midpoint of training.
pub fn train_joint(
    oracle: OraclePolicy,
    cfg: &Config,
    seed: u64,
    w0: f64,
    out_dir: &Path,
) -> Result<(Trainer, Vec<UpdateMetrics>)> {
    let mut cfg = cfg.clone();
    cfg.mixer.alpha = 0.0;
    cfg.losses.lambda = 0.0;
    cfg.train.privileged_critic = false;
    let mut trainer = Trainer::new(&cfg, seed)?;
    trainer.scheme = "joint".into();
    trainer.joint = Some(JointTransfer { oracle, w0 });
    let rows = trainer.train(out_dir)?;
    Ok((trainer, rows))
}

/// Plain PPO on proprioception only: alpha 0, no transformer losses, critic
/// on the last proprioceptive position.
pub fn train_ppo(cfg: &Config, seed: u64, out_dir: &Path) -> Result<(Trainer, Vec<UpdateMetrics>)> {
    let mut cfg = cfg.clone();
    cfg.mixer.alpha = 0.0;
    cfg.losses.lambda = 0.0;
    cfg.train.privileged_critic = false;
    let mut trainer = Trainer::new(&cfg, seed)?;
    trainer.scheme = "ppo".into();
    let rows = trainer.train(out_dir)?;
    Ok((trainer, rows))
}

/// Online supervised transfer from an all-teacher unified model: the student
/// acts, a frozen copy of the network labels states through its teacher
/// head, and the teacher-path parameters are excluded from updates.
pub fn post_hoc_transfer(
    net: &mut UltNet,
    cfg: &Config,
    budget_steps: usize,
    seed: u64,
) -> Result<Vec<UpdateMetrics>> {
    if net.is_deploy_only() {
        return Err(UltError::Usage(
            "post-hoc transfer needs the full network, not a deploy export".into(),
        ));
    }
    let frozen = net.clone();
    let dc = DistillConfig::from_train(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9057_40c);
    let mut env = ToyEnv::new(seed.wrapping_add(0xbee));
    let mut window = TrajectoryWindow::new(cfg.net.window, cfg.net.obs_dim, cfg.net.act_dim);
    let mut opt = AdamW::new(cfg.train.learning_rate, cfg.train.weight_decay);
    opt.freeze_prefix("teacher_head.");
    opt.freeze_prefix("log_std_teacher");
    opt.freeze_prefix("priv_enc.");
    let mut rows = Vec::new();
    let mut env_steps = 0u64;
    let mut update = 0usize;
    let mut obs = env.reset(&cfg.env)?.to_vec();
    window.push_reset(obs.clone());
    let mut remaining = budget_steps;
    while remaining > 0 {
        let take = dc.round_steps.min(remaining);
        remaining -= take;
        let mut samples = Vec::with_capacity(take);
        for _ in 0..take {
            let privilege = env.privilege(&cfg.env).to_vec();
            let tokens = window.tokens();
            let (label_out, _) = frozen.forward(&tokens, Some(&privilege))?;
            let label = label_out.teacher_mean.expect("teacher head");
            let (out, _) = net.forward(&tokens, None)?;
            let action = gaussian_sample(&out.student_mean, &net.student_log_std(), &mut rng);
            samples.push(DistillSample { tokens, label });
            let act_arr = [action[0], action[1], action[2], action[3]];
            let outcome = env.step(act_arr, &cfg.env)?;
            if matches!(outcome.done, crate::env::Done::Running) {
                obs = outcome.proprio.to_vec();
                window.push(obs.clone(), action.to_vec());
            } else {
                env.update_curriculum(&cfg.env);
                obs = env.reset(&cfg.env)?.to_vec();
                window.push_reset(obs.clone());
            }
        }
        env_steps += take as u64;
        let dataset = DistillDataset { samples, source: "student-rollout" };
        for _ in 0..dc.epochs_per_round {
            let loss = regression_epoch(net, &mut opt, &dataset, dc.minibatch, &mut rng)?;
            update += 1;
            rows.push(distill_metrics_row(update, env_steps, loss, "post-hoc"));
        }
    }
    Ok(rows)
}

/// Write baseline metric rows with the common schema.
pub fn write_rows(rows: &[UpdateMetrics], path: &Path) -> Result<()> {
    let mut log = MetricsLog::create(path)?;
    for r in rows {
        log.append(r)?;
    }
    Ok(())
}
