//! Terrain curriculum: promote when an episode's linear tracking return
//! reaches the promote fraction of the maximum achievable, demote below the
//! demote fraction.

use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;

/// Accumulates the weighted linear tracking return over one episode.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrackingTracker {
    pub lin_return: f64,
}

impl TrackingTracker {
    pub fn add(&mut self, lin_tracking_weighted: f64) {
        self.lin_return += lin_tracking_weighted;
    }

    pub fn reset(&mut self) {
        self.lin_return = 0.0;
    }

    /// Fraction of the maximum achievable tracking return for a full episode.
    pub fn fraction(&self, cfg: &EnvConfig) -> f64 {
        let max = cfg.reward.lin_tracking * cfg.episode_steps() as f64;
        if max <= 0.0 {
            0.0
        } else {
            self.lin_return / max
        }
    }
}

pub fn curriculum_update(fraction: f64, level: usize, cfg: &EnvConfig) -> usize {
    if fraction >= cfg.promote_fraction {
        (level + 1).min(cfg.max_level)
    } else if fraction < cfg.demote_fraction {
        level.saturating_sub(1)
    } else {
        level
    }
}
