//! Rolling trajectory windows, state-action tokenization and PPO rollout
//! batches with generalized advantage estimation.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UltError};

/// Token layout: observation first, previous action second, always.
pub fn tokenize(obs: &[f64], a_prev: &[f64], m: usize, n: usize) -> Result<Array1<f64>> {
    if obs.len() != m || a_prev.len() != n {
        return Err(UltError::Config(format!(
            "token dims mismatch: obs {} (want {m}), action {} (want {n})",
            obs.len(),
            a_prev.len()
        )));
    }
    let mut z = Array1::zeros(m + n);
    z.slice_mut(ndarray::s![..m]).assign(&Array1::from(obs.to_vec()));
    z.slice_mut(ndarray::s![m..]).assign(&Array1::from(a_prev.to_vec()));
    Ok(z)
}

/// Ring buffer of (observation, previous action) pairs, oldest evicted first.
/// The first pair after a reset uses the zero previous action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl TrajectoryWindow {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        Self { capacity, obs_dim, act_dim, pairs: Vec::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    pub fn push(&mut self, obs: Vec<f64>, a_prev: Vec<f64>) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(a_prev.len(), self.act_dim);
        if self.pairs.len() == self.capacity {
            self.pairs.remove(0);
        }
        self.pairs.push((obs, a_prev));
    }

    /// Push the post-reset pair: observation with the zero previous action.
    pub fn push_reset(&mut self, obs: Vec<f64>) {
        self.clear();
        self.push(obs, vec![0.0; self.act_dim]);
    }

    pub fn pairs(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.pairs
    }

    /// Chronological token matrix, shape (len, m + n).
    pub fn tokens(&self) -> Array2<f64> {
        let d = self.obs_dim + self.act_dim;
        let mut out = Array2::zeros((self.pairs.len(), d));
        for (i, (o, a)) in self.pairs.iter().enumerate() {
            for (j, v) in o.iter().enumerate() {
                out[[i, j]] = *v;
            }
            for (j, v) in a.iter().enumerate() {
                out[[i, self.obs_dim + j]] = *v;
            }
        }
        out
    }
}

/// Which head produced the executed action at collection time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Teacher,
    Student,
}

/// One flattened (agent, step) element of a rollout.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub tokens: Array2<f64>,
    pub privilege: Vec<f64>,
    pub action: Vec<f64>,
    pub provenance: Provenance,
    pub behavior_logp: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub advantage: f64,
    pub return_target: f64,
    /// Ground-truth next token for the final window position, when the next
    /// step exists within the same episode.
    pub next_token: Option<Array1<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub steps: Vec<RolloutStep>,
}

/// Standard GAE recursion masked at done boundaries.
/// `values` must carry the bootstrap tail (length = rewards.len() + 1).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t = rewards.len();
    assert_eq!(values.len(), t + 1, "values must include the bootstrap tail");
    assert_eq!(dones.len(), t);
    let mut adv = vec![0.0; t];
    let mut acc = 0.0;
    for k in (0..t).rev() {
        let mask = if dones[k] { 0.0 } else { 1.0 };
        let delta = rewards[k] + gamma * values[k + 1] * mask - values[k];
        acc = delta + gamma * lambda * mask * acc;
        adv[k] = acc;
    }
    let ret: Vec<f64> = adv.iter().zip(values.iter()).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shift/scale advantages to mean 0, unit std; degenerate variance gives zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        for a in adv.iter_mut() {
            *a = 0.0;
        }
    } else {
        for a in adv.iter_mut() {
            *a = (*a - mean) / std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_layout() {
        let z = tokenize(&[1.0, 2.0, 3.0], &[4.0, 5.0], 3, 2).unwrap();
        assert_eq!(z.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn tokenize_paper_dims() {
        let z = tokenize(&vec![0.0; 37], &vec![0.0; 12], 37, 12).unwrap();
        assert_eq!(z.len(), 49);
        let z = tokenize(&vec![0.0; 17], &vec![0.0; 4], 17, 4).unwrap();
        assert_eq!(z.len(), 21);
    }

    #[test]
    fn tokenize_dim_mismatch_is_error() {
        assert!(tokenize(&[1.0], &[2.0], 3, 1).is_err());
    }

    #[test]
    fn tokenize_round_trips_at_m() {
        let o = vec![0.3, -0.2, 0.9];
        let a = vec![1.5];
        let z = tokenize(&o, &a, 3, 1).unwrap();
        assert_eq!(&z.to_vec()[..3], o.as_slice());
        assert_eq!(&z.to_vec()[3..], a.as_slice());
    }

    #[test]
    fn window_evicts_oldest() {
        let mut w = TrajectoryWindow::new(15, 1, 1);
        for k in 0..20 {
            w.push(vec![k as f64], vec![0.0]);
        }
        assert_eq!(w.len(), 15);
        assert_eq!(w.pairs()[0].0[0], 5.0);
        assert_eq!(w.pairs()[14].0[0], 19.0);
    }

    #[test]
    fn reset_pair_has_zero_action() {
        let mut w = TrajectoryWindow::new(15, 2, 3);
        w.push(vec![1.0, 1.0], vec![9.0, 9.0, 9.0]);
        w.push_reset(vec![2.0, 2.0]);
        assert_eq!(w.len(), 1);
        assert_eq!(w.pairs()[0].1, vec![0.0; 3]);
    }

    #[test]
    fn gae_terminal_step() {
        let (adv, ret) = compute_gae(&[1.0], &[0.0, 0.0], &[true], 0.99, 0.95);
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn gae_hand_recursion() {
        let (adv, _) = compute_gae(&[1.0, 1.0], &[0.0, 0.0, 0.0], &[false, false], 0.99, 0.95);
        assert!((adv[0] - 1.9405).abs() < 1e-12, "{}", adv[0]);
        assert!((adv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gae_gamma_zero_collapses() {
        let rewards = [0.3, -0.7, 1.1];
        let values = [0.1, 0.2, 0.3, 0.4];
        let (adv, _) = compute_gae(&rewards, &values, &[false; 3], 0.0, 0.7);
        for k in 0..3 {
            assert!((adv[k] - (rewards[k] - values[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_constant_gives_zeros() {
        let mut a = vec![3.0; 10];
        normalize_advantages(&mut a);
        assert!(a.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn normalize_two_point_symmetry() {
        let mut a = vec![0.0, 2.0];
        normalize_advantages(&mut a);
        assert_eq!(a, vec![-1.0, 1.0]);
    }

    /// Brute-force oracle: materialize sum_k (gamma*lambda)^k delta_{t+k}
    /// with the episode cut at done flags.
    fn gae_oracle(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let t = rewards.len();
        let delta: Vec<f64> = (0..t)
            .map(|k| {
                let mask = if dones[k] { 0.0 } else { 1.0 };
                rewards[k] + gamma * values[k + 1] * mask - values[k]
            })
            .collect();
        (0..t)
            .map(|start| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in start..t {
                    sum += w * delta[k];
                    if dones[k] {
                        break;
                    }
                    w *= gamma * lambda;
                }
                sum
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gae_matches_bruteforce_oracle(
            rewards in proptest::collection::vec(-5.0f64..5.0, 1..=8),
            values_seed in proptest::collection::vec(-5.0f64..5.0, 9),
            dones_seed in proptest::collection::vec(any::<bool>(), 8),
            gamma in 0.0f64..1.0,
            lambda in 0.0f64..1.0,
        ) {
            let t = rewards.len();
            let values = values_seed[..t + 1].to_vec();
            let dones = dones_seed[..t].to_vec();
            let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, lambda);
            let oracle = gae_oracle(&rewards, &values, &dones, gamma, lambda);
            for k in 0..t {
                prop_assert!((adv[k] - oracle[k]).abs() <= 1e-10);
                prop_assert!((ret[k] - (oracle[k] + values[k])).abs() <= 1e-10);
            }
        }

        #[test]
        fn window_matches_list_reference(
            pushes in proptest::collection::vec(-10.0f64..10.0, 1..40),
        ) {
            let mut w = TrajectoryWindow::new(15, 1, 1);
            for (i, v) in pushes.iter().enumerate() {
                w.push(vec![*v], vec![i as f64]);
            }
            let start = pushes.len().saturating_sub(15);
            let expect: Vec<f64> = pushes[start..].to_vec();
            let got: Vec<f64> = w.pairs().iter().map(|(o, _)| o[0]).collect();
            prop_assert_eq!(got, expect);
        }

        #[test]
        fn normalize_statistics(
            mut adv in proptest::collection::vec(-100.0f64..100.0, 2..64),
        ) {
            prop_assume!({
                let n = adv.len() as f64;
                let mean = adv.iter().sum::<f64>() / n;
                let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
                var.sqrt() >= 1e-6
            });
            normalize_advantages(&mut adv);
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
