//! Teacher/student action mixing. Each agent draws a uniform mask value and
//! executes teacher actions while it stays below alpha; masks are redrawn
//! every resample period.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::MixerConfig;
use crate::error::{Result, UltError};
use crate::rollout::Provenance;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixerState {
    mask: Vec<f64>,
    steps_since_resample: usize,
}

impl MixerState {
    pub fn new<R: Rng>(agents: usize, cfg: &MixerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if agents == 0 {
            return Err(UltError::Config("mixer needs at least one agent".into()));
        }
        let mut s = Self { mask: vec![0.0; agents], steps_since_resample: 0 };
        s.resample(rng);
        Ok(s)
    }

    fn resample<R: Rng>(&mut self, rng: &mut R) {
        for m in self.mask.iter_mut() {
            *m = rng.gen_range(0.0..1.0);
        }
        self.steps_since_resample = 0;
    }

    /// Advance one control step, redrawing the masks when the period elapses.
    pub fn step<R: Rng>(&mut self, cfg: &MixerConfig, rng: &mut R) {
        self.steps_since_resample += 1;
        if self.steps_since_resample >= cfg.resample_period {
            self.resample(rng);
        }
    }

    /// Which head drives the given agent under the current mask.
    pub fn provenance(&self, agent: usize, cfg: &MixerConfig) -> Provenance {
        if self.mask[agent] < cfg.alpha {
            Provenance::Teacher
        } else {
            Provenance::Student
        }
    }

    pub fn teacher_fraction(&self, cfg: &MixerConfig) -> f64 {
        let teachers = self
            .mask
            .iter()
            .filter(|m| **m < cfg.alpha)
            .count();
        teachers as f64 / self.mask.len() as f64
    }
}
