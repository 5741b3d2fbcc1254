//! Velocity command sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::env::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub v_x: f64,
    pub v_y: f64,
    pub omega_z: f64,
}

impl Command {
    pub fn zero() -> Self {
        Self { v_x: 0.0, v_y: 0.0, omega_z: 0.0 }
    }
}

/// Sample linear components uniformly and derive the yaw-rate command from a
/// sampled desired heading, capped at the angular command bound.
pub fn sample_command<R: Rng>(rng: &mut R, current_heading: f64, cfg: &EnvConfig) -> Command {
    let v_x = rng.gen_range(-cfg.max_lin_command..cfg.max_lin_command);
    let v_y = rng.gen_range(-cfg.max_lin_command..cfg.max_lin_command);
    let heading_des = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let err = wrap_angle(heading_des - current_heading);
    let omega_z = (cfg.heading_gain * err).clamp(-cfg.max_ang_command, cfg.max_ang_command);
    Command { v_x, v_y, omega_z }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn components_within_bounds() {
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let c = sample_command(&mut rng, 0.3, &cfg);
            assert!(c.v_x.abs() <= 0.5 && c.v_y.abs() <= 0.5);
            assert!(c.omega_z.abs() <= 0.5);
        }
    }

    #[test]
    fn heading_error_maps_through_gain_and_cap() {
        let cfg = EnvConfig::default();
        // zero heading error => omega 0
        let err = wrap_angle(1.2 - 1.2);
        assert_eq!((cfg.heading_gain * err).clamp(-0.5, 0.5), 0.0);
        // error pi with unit gain saturates at the cap
        let err = std::f64::consts::PI;
        assert_eq!((cfg.heading_gain * err).clamp(-0.5, 0.5), 0.5);
    }
}
