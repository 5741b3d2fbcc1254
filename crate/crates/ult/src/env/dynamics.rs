//! Hidden randomized dynamics parameters (the d_t portion of privilege).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DrRanges, EnvConfig};
use crate::error::Result;

pub const DYNAMICS_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub kp_scale: f64,
    pub kd_scale: f64,
    pub friction_scale: f64,
    pub motor_strength_scale: f64,
    pub payload_mass: f64,
    pub payload_com_offset: f64,
    pub gravity: f64,
    /// Seconds, quantized to whole control steps.
    pub system_delay: f64,
    /// Per-axis velocity impulse applied on the push schedule, m/s.
    pub push_velocity: [f64; 2],
}

impl DynamicsParams {
    /// Nominal parameters: all scales 1, no payload, no delay, no push.
    pub fn nominal() -> Self {
        Self {
            kp_scale: 1.0,
            kd_scale: 1.0,
            friction_scale: 1.0,
            motor_strength_scale: 1.0,
            payload_mass: 0.0,
            payload_com_offset: 0.0,
            gravity: 9.81,
            system_delay: 0.0,
            push_velocity: [0.0, 0.0],
        }
    }

    pub fn delay_steps(&self, dt_ctrl: f64) -> usize {
        (self.system_delay / dt_ctrl).round() as usize
    }

    pub fn to_vec(&self) -> [f64; DYNAMICS_DIM] {
        [
            self.kp_scale,
            self.kd_scale,
            self.friction_scale,
            self.motor_strength_scale,
            self.payload_mass,
            self.payload_com_offset,
            self.gravity,
            self.system_delay,
            self.push_velocity[0],
            self.push_velocity[1],
        ]
    }
}

fn draw<R: Rng>(rng: &mut R, r: crate::config::Range) -> f64 {
    if r.low == r.high {
        r.low
    } else {
        rng.gen_range(r.low..r.high)
    }
}

/// Draw one set of dynamics parameters uniformly from the configured ranges.
/// The system delay is rounded to whole control steps.
pub fn randomize_dynamics<R: Rng>(
    rng: &mut R,
    ranges: &DrRanges,
    cfg: &EnvConfig,
) -> Result<DynamicsParams> {
    ranges.validate()?;
    let raw_delay = draw(rng, ranges.system_delay);
    let delay_steps = (raw_delay / cfg.dt_ctrl).round();
    Ok(DynamicsParams {
        kp_scale: draw(rng, ranges.kp_scale),
        kd_scale: draw(rng, ranges.kd_scale),
        friction_scale: draw(rng, ranges.friction_scale),
        motor_strength_scale: draw(rng, ranges.motor_strength_scale),
        payload_mass: draw(rng, ranges.payload_mass),
        payload_com_offset: draw(rng, ranges.payload_com_offset),
        gravity: draw(rng, ranges.gravity),
        system_delay: delay_steps * cfg.dt_ctrl,
        push_velocity: [draw(rng, ranges.push_velocity), draw(rng, ranges.push_velocity)],
    })
}
