//! Decoupled-weight-decay adaptive-moment optimizer over the network's
//! named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{UltNet, LOG_STD_MAX, LOG_STD_MIN};
use super::params::ParamVisitor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    moments_m: BTreeMap<String, Vec<f64>>,
    moments_v: BTreeMap<String, Vec<f64>>,
    /// Parameter name prefixes excluded from updates.
    pub frozen_prefixes: Vec<String>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments_m: BTreeMap::new(),
            moments_v: BTreeMap::new(),
            frozen_prefixes: Vec::new(),
        }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    pub fn step(&mut self, net: &mut UltNet) {
        self.step_visit(&mut |f| net.visit_params(f));
    }

    /// Update any named parameter collection; `visit` must apply the given
    /// callback to every parameter, as `UltNet::visit_params` does.
    pub fn step_visit(&mut self, visit: &mut dyn FnMut(&mut ParamVisitor)) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let frozen = self.frozen_prefixes.clone();
        let moments_m = &mut self.moments_m;
        let moments_v = &mut self.moments_v;
        visit(&mut |name, mut p| {
            if frozen.iter().any(|f| name.starts_with(f.as_str())) {
                return;
            }
            let n = p.value_slice().len();
            let m = moments_m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = moments_v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            // weight decay is decoupled; bias/norm/log-std vectors skip it
            let decay = if name.ends_with(".w") || name == "pos_emb" { wd } else { 0.0 };
            let is_log_std = name.starts_with("log_std");
            let grads: Vec<f64> = p.grad_slice().to_vec();
            let values = p.value_slice();
            for i in 0..n {
                let g = grads[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= lr * (mhat / (vhat.sqrt() + eps) + decay * values[i]);
                if is_log_std {
                    values[i] = values[i].clamp(LOG_STD_MIN, LOG_STD_MAX);
                }
            }
        });
    }
}
