//! The privilege-consuming feed-forward reference policy: PPO-trained on
//! [proprio ‖ privilege] and used as the normalization denominator and as the
//! expert for every supervised baseline.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::env::{Done, ToyEnv};
use crate::error::{Result, UltError};
use crate::losses::ppo_policy_terms;
use crate::net::params::{Activation, Mlp, Param1, ParamMut, ParamVisitor};
use crate::net::{
    gaussian_entropy, gaussian_log_prob, gaussian_log_prob_grads, gaussian_sample, AdamW,
};
use crate::rollout::{compute_gae, normalize_advantages};
use crate::trainer::{adaptive_lr, MetricsLog, UpdateMetrics};

const LOG_STD_INIT: f64 = -0.5;

pub struct OraclePolicy {
    pub obs_dim: usize,
    pub priv_dim: usize,
    pub act_dim: usize,
    pub hidden: usize,
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: Param1,
}

impl OraclePolicy {
    pub fn new(obs_dim: usize, priv_dim: usize, act_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = obs_dim + priv_dim;
        Self {
            obs_dim,
            priv_dim,
            act_dim,
            hidden,
            actor: Mlp::new(&[input, hidden, hidden, act_dim], Activation::Elu, &mut rng),
            critic: Mlp::new(&[input, hidden, hidden, 1], Activation::Elu, &mut rng),
            log_std: Param1::filled(act_dim, LOG_STD_INIT),
        }
    }

    pub fn input(&self, proprio: &[f64], privilege: &[f64]) -> Result<Array1<f64>> {
        if proprio.len() != self.obs_dim || privilege.len() != self.priv_dim {
            return Err(UltError::Config(format!(
                "oracle input dims {}+{} != {}+{}",
                proprio.len(),
                privilege.len(),
                self.obs_dim,
                self.priv_dim
            )));
        }
        let mut x = Vec::with_capacity(self.obs_dim + self.priv_dim);
        x.extend_from_slice(proprio);
        x.extend_from_slice(privilege);
        Ok(Array1::from(x))
    }

    /// Deterministic mean action for a given state (the label for
    /// distillation).
    pub fn mean_action(&self, proprio: &[f64], privilege: &[f64]) -> Result<Array1<f64>> {
        let x = self.input(proprio, privilege)?;
        Ok(self.actor.forward(&x).0)
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor) {
        self.actor.visit("actor", f);
        self.critic.visit("critic", f);
        f("log_std", ParamMut::P1(&mut self.log_std));
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, mut p| {
            for g in p.grad_slice() {
                *g = 0.0;
            }
        });
    }

    fn params_map(&mut self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |name, mut p| {
            out.insert(name.to_string(), p.value_slice().to_vec());
        });
        out
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let state = OracleState {
            obs_dim: self.obs_dim,
            priv_dim: self.priv_dim,
            act_dim: self.act_dim,
            hidden: self.hidden,
            params: self.params_map(),
        };
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, &state)
            .map_err(|e| UltError::Checkpoint(format!("oracle encode: {e}")))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let state: OracleState = serde_json::from_reader(r)
            .map_err(|e| UltError::Checkpoint(format!("oracle decode: {e}")))?;
        let mut p =
            Self::new(state.obs_dim, state.priv_dim, state.act_dim, state.hidden, 0);
        let mut missing = Vec::new();
        p.visit_params(&mut |name, mut pm| match state.params.get(name) {
            Some(v) if v.len() == pm.value_slice().len() => {
                pm.value_slice().copy_from_slice(v);
            }
            _ => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(UltError::Checkpoint(format!(
                "{}: missing/mismatched oracle parameters: {}",
                path.display(),
                missing.join(", ")
            )));
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct OracleState {
    obs_dim: usize,
    priv_dim: usize,
    act_dim: usize,
    hidden: usize,
    params: BTreeMap<String, Vec<f64>>,
}

struct OracleStep {
    input: Array1<f64>,
    action: Array1<f64>,
    behavior_logp: f64,
    value: f64,
    reward: f64,
    done: bool,
    advantage: f64,
    return_target: f64,
}

/// PPO training of the reference policy with the same hyperparameters and
/// environment setup as the unified trainer.
pub fn train_oracle(
    cfg: &Config,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(OraclePolicy, Vec<UpdateMetrics>)> {
    cfg.validate()?;
    let mut policy = OraclePolicy::new(
        cfg.net.obs_dim,
        cfg.net.priv_dim,
        cfg.net.act_dim,
        cfg.net.teacher_hidden[0].max(64),
        seed,
    );
    let mut opt = AdamW::new(cfg.train.learning_rate, cfg.train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0acc_1e00);
    let mut envs = Vec::with_capacity(cfg.train.agents);
    let mut obs = Vec::with_capacity(cfg.train.agents);
    for i in 0..cfg.train.agents {
        let mut env = ToyEnv::new(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
        obs.push(env.reset(&cfg.env)?.to_vec());
        envs.push(env);
    }
    let mut lr = cfg.train.learning_rate;
    let mut env_steps: u64 = 0;
    let mut rows = Vec::new();
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(MetricsLog::create(&d.join("metrics.csv"))?)
        }
        None => None,
    };

    for update in 0..cfg.train.total_updates {
        let horizon = cfg.train.horizon;
        let agents = cfg.train.agents;
        let mut traces: Vec<Vec<OracleStep>> =
            (0..agents).map(|_| Vec::with_capacity(horizon)).collect();
        let mut reward_sum = 0.0;
        let mut lin_sum = 0.0;
        let mut ang_sum = 0.0;
        let mut steps = 0usize;
        for _ in 0..horizon {
            for a in 0..agents {
                let privilege = envs[a].privilege(&cfg.env).to_vec();
                let input = policy.input(&obs[a], &privilege)?;
                let (mean, _) = policy.actor.forward(&input);
                let value = policy.critic.forward(&input).0[0];
                let action = gaussian_sample(&mean, &policy.log_std.v, &mut rng);
                let logp = gaussian_log_prob(&mean, &policy.log_std.v, &action);
                let act_arr = [action[0], action[1], action[2], action[3]];
                let outcome = envs[a].step(act_arr, &cfg.env)?;
                reward_sum += outcome.reward.total;
                lin_sum += outcome.reward.lin_tracking_weighted();
                ang_sum += outcome.reward.ang_tracking_weighted();
                steps += 1;
                let mut reward = outcome.reward.total;
                let done = match outcome.done {
                    Done::Running => false,
                    Done::Timeout => {
                        let p = envs[a].privilege(&cfg.env).to_vec();
                        let x = policy.input(&outcome.proprio.to_vec(), &p)?;
                        reward += cfg.train.gamma * policy.critic.forward(&x).0[0];
                        true
                    }
                    Done::Collision => true,
                };
                traces[a].push(OracleStep {
                    input,
                    action,
                    behavior_logp: logp,
                    value,
                    reward,
                    done,
                    advantage: 0.0,
                    return_target: 0.0,
                });
                if done {
                    envs[a].update_curriculum(&cfg.env);
                    obs[a] = envs[a].reset(&cfg.env)?.to_vec();
                } else {
                    obs[a] = outcome.proprio.to_vec();
                }
            }
        }
        env_steps += (agents * horizon) as u64;

        let mut batch = Vec::with_capacity(agents * horizon);
        for a in 0..agents {
            let privilege = envs[a].privilege(&cfg.env).to_vec();
            let x = policy.input(&obs[a], &privilege)?;
            let tail = policy.critic.forward(&x).0[0];
            let rewards: Vec<f64> = traces[a].iter().map(|s| s.reward).collect();
            let mut values: Vec<f64> = traces[a].iter().map(|s| s.value).collect();
            values.push(tail);
            let dones: Vec<bool> = traces[a].iter().map(|s| s.done).collect();
            let (adv, ret) =
                compute_gae(&rewards, &values, &dones, cfg.train.gamma, cfg.train.gae_lambda);
            for (s, (a_k, r_k)) in traces[a].iter_mut().zip(adv.iter().zip(ret.iter())) {
                s.advantage = *a_k;
                s.return_target = *r_k;
            }
            batch.append(&mut traces[a]);
        }
        let mut advs: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
        normalize_advantages(&mut advs);
        for (s, a) in batch.iter_mut().zip(advs.iter()) {
            s.advantage = *a;
        }

        let mb = cfg.train.minibatch.min(batch.len());
        let inv_mb = 1.0 / mb as f64;
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut kl_mean = 0.0;
        let mut rl_sum = 0.0;
        let mut count = 0usize;
        for _ in 0..cfg.train.mini_epochs {
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(mb) {
                if chunk.len() < mb {
                    continue;
                }
                policy.zero_grad();
                let mut kl_sum = 0.0;
                for &idx in chunk {
                    let s = &batch[idx];
                    let (mean, actor_cache) = policy.actor.forward(&s.input);
                    let (v, critic_cache) = policy.critic.forward(&s.input);
                    let new_logp = gaussian_log_prob(&mean, &policy.log_std.v, &s.action);
                    let p = ppo_policy_terms(
                        new_logp,
                        s.behavior_logp,
                        s.advantage,
                        cfg.losses.clip_range,
                    );
                    let entropy = gaussian_entropy(&policy.log_std.v);
                    let ve = v[0] - s.return_target;
                    rl_sum += p.loss + cfg.losses.value_coef * ve * ve
                        - cfg.losses.entropy_coef * entropy;
                    kl_sum += p.approx_kl;
                    count += 1;
                    let (dm, dls) = gaussian_log_prob_grads(&mean, &policy.log_std.v, &s.action);
                    let d_mean = dm.mapv(|g| g * p.d_new_logp * inv_mb);
                    policy.actor.backward(&actor_cache, &d_mean);
                    let dv = Array1::from(vec![cfg.losses.value_coef * 2.0 * ve * inv_mb]);
                    policy.critic.backward(&critic_cache, &dv);
                    for k in 0..policy.act_dim {
                        policy.log_std.g[k] += (dls[k] * p.d_new_logp
                            - cfg.losses.entropy_coef)
                            * inv_mb;
                    }
                }
                kl_mean = kl_sum / mb as f64;
                lr = adaptive_lr(lr, kl_mean, cfg.train.desired_kl, cfg.train.lr_min, cfg.train.lr_max);
                opt.lr = lr;
                opt.step_visit(&mut |f| policy.visit_params(f));
            }
        }

        let row = UpdateMetrics {
            update: update + 1,
            env_steps,
            mean_reward: reward_sum / steps.max(1) as f64,
            lin_track: lin_sum / steps.max(1) as f64,
            ang_track: ang_sum / steps.max(1) as f64,
            l_n: 0.0,
            l_a: 0.0,
            l_rl: rl_sum / count.max(1) as f64,
            approx_kl: kl_mean,
            lr,
            mean_curriculum_level: envs.iter().map(|e| e.level as f64).sum::<f64>()
                / envs.len() as f64,
            teacher_fraction: 0.0,
            scheme: "oracle".into(),
        };
        if !row.l_rl.is_finite() {
            return Err(UltError::Internal(format!(
                "oracle training diverged at update {}",
                update + 1
            )));
        }
        if let Some(log) = log.as_mut() {
            log.append(&row)?;
        }
        rows.push(row);
    }
    if let Some(d) = out_dir {
        policy.save(&d.join("oracle.json"))?;
    }
    Ok((policy, rows))
}
