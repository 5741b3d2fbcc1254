//! Per-step reward: tracking bonuses and locomotion-quality penalties.

use serde::{Deserialize, Serialize};

use crate::config::RewardScales;

pub const REWARD_TERM_NAMES: [&str; 9] = [
    "lin_tracking",
    "ang_tracking",
    "body_z_vel",
    "body_rotation",
    "joint_accel",
    "output_work",
    "action_rate",
    "feet_slip",
    "collision",
];

/// Everything the reward table consumes for one control step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardInputs {
    pub cmd_v: [f64; 2],
    pub v: [f64; 2],
    pub cmd_omega: f64,
    pub omega: f64,
    /// Roughness-induced bounce channel standing in for vertical velocity.
    pub v_z: f64,
    pub joint_accel: [f64; 4],
    /// Integral of |tau . qdot| over the control step.
    pub work: f64,
    pub action: [f64; 4],
    pub prev_action: [f64; 4],
    pub foot_contacts: [bool; 2],
    /// Planar foot speed per foot (base speed while in contact).
    pub foot_speed: [f64; 2],
    pub collision: bool,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    /// Unweighted term values, reward-table order.
    pub raw: [f64; 9],
    /// Scale * term, same order.
    pub weighted: [f64; 9],
    pub total: f64,
}

impl RewardTerms {
    pub fn lin_tracking_weighted(&self) -> f64 {
        self.weighted[0]
    }

    pub fn ang_tracking_weighted(&self) -> f64 {
        self.weighted[1]
    }
}

pub fn compute_reward(inputs: &RewardInputs, scales: &RewardScales) -> RewardTerms {
    let dvx = inputs.cmd_v[0] - inputs.v[0];
    let dvy = inputs.cmd_v[1] - inputs.v[1];
    let lin = (-5.0 * (dvx * dvx + dvy * dvy)).exp();
    let dw = inputs.cmd_omega - inputs.omega;
    let ang = (-5.0 * dw * dw).exp();
    let body_z = inputs.v_z * inputs.v_z;
    let body_rot = inputs.omega * inputs.omega;
    let accel: f64 = inputs.joint_accel.iter().map(|a| a * a).sum();
    let work = inputs.work;
    let rate: f64 = inputs
        .action
        .iter()
        .zip(inputs.prev_action.iter())
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    let slip: f64 = inputs
        .foot_contacts
        .iter()
        .zip(inputs.foot_speed.iter())
        .map(|(c, s)| if *c { s.abs() } else { 0.0 })
        .sum();
    let collision = if inputs.collision { 1.0 } else { 0.0 };

    let raw = [lin, ang, body_z, body_rot, accel, work, rate, slip, collision];
    let w = [
        scales.lin_tracking,
        scales.ang_tracking,
        scales.body_z_vel,
        scales.body_rotation,
        scales.joint_accel,
        scales.output_work,
        scales.action_rate,
        scales.feet_slip,
        scales.collision,
    ];
    let mut weighted = [0.0; 9];
    let mut total = 0.0;
    for i in 0..9 {
        weighted[i] = raw[i] * w[i];
        total += weighted[i];
    }
    RewardTerms { raw, weighted, total }
}
