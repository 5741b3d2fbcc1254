//! Toy terrain regimes. Five regime types with 10 difficulty levels each;
//! a regime contributes a ground slope, a roughness amplitude, a push scale
//! and a 1-D height profile used for the privileged terrain samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeKind {
    SmoothSlope,
    RoughSlope,
    StairsUp,
    StairsDown,
    Discrete,
}

pub const ALL_REGIMES: [RegimeKind; 5] = [
    RegimeKind::SmoothSlope,
    RegimeKind::RoughSlope,
    RegimeKind::StairsUp,
    RegimeKind::StairsDown,
    RegimeKind::Discrete,
];

impl RegimeKind {
    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::SmoothSlope => "smooth_slope",
            RegimeKind::RoughSlope => "rough_slope",
            RegimeKind::StairsUp => "stairs_up",
            RegimeKind::StairsDown => "stairs_down",
            RegimeKind::Discrete => "discrete",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        ALL_REGIMES.iter().copied().find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub kind: RegimeKind,
    pub level: usize,
}

impl TerrainSpec {
    pub fn new(kind: RegimeKind, level: usize) -> Self {
        Self { kind, level }
    }

    /// Difficulty fraction in [0, 1]; level 0 is flat and calm.
    fn frac(&self) -> f64 {
        self.level as f64 / 9.0
    }

    /// Mean ground grade (dh/dx) experienced by the base.
    pub fn slope(&self) -> f64 {
        let f = self.frac();
        match self.kind {
            RegimeKind::SmoothSlope => 0.12 * f,
            RegimeKind::RoughSlope => 0.08 * f,
            RegimeKind::StairsUp => 0.15 * f,
            RegimeKind::StairsDown => -0.15 * f,
            RegimeKind::Discrete => 0.0,
        }
    }

    /// Roughness amplitude driving the bounce channel and velocity noise.
    pub fn roughness(&self) -> f64 {
        let f = self.frac();
        match self.kind {
            RegimeKind::SmoothSlope => 0.0,
            RegimeKind::RoughSlope => 0.04 + 0.16 * f,
            RegimeKind::StairsUp | RegimeKind::StairsDown => 0.02 + 0.10 * f,
            RegimeKind::Discrete => 0.05 + 0.20 * f,
        }
    }

    /// Multiplier on the randomized push impulse magnitude.
    pub fn push_scale(&self) -> f64 {
        0.2 + 0.8 * self.frac()
    }

    /// Height profile along x, used for the privileged forward samples.
    pub fn height(&self, x: f64) -> f64 {
        let f = self.frac();
        match self.kind {
            RegimeKind::SmoothSlope => self.slope() * x,
            RegimeKind::RoughSlope => self.slope() * x + self.roughness() * (7.0 * x).sin(),
            RegimeKind::StairsUp | RegimeKind::StairsDown => {
                let step_len = 0.3;
                let step_h = self.slope() * step_len;
                step_h * (x / step_len).floor()
            }
            RegimeKind::Discrete => {
                // deterministic pseudo-random plateaus
                let cell = (x / 0.5).floor() as i64;
                let h = cell.wrapping_mul(0x9E37_79B9_7F4A_7C15_u64 as i64);
                let u = (h as u64 >> 11) as f64 / (1u64 << 53) as f64;
                (0.05 + 0.15 * f) * (2.0 * u - 1.0)
            }
        }
    }

    /// Five forward height samples starting at the base position.
    pub fn sample_line(&self, x: f64, spacing: f64) -> [f64; 5] {
        let mut out = [0.0; 5];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.height(x + spacing * k as f64);
        }
        out
    }
}

/// Draw a regime kind according to the configured proportions.
pub fn sample_regime<R: Rng>(rng: &mut R, cfg: &EnvConfig) -> RegimeKind {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (kind, p) in ALL_REGIMES.iter().zip(cfg.regime_proportions.iter()) {
        acc += p;
        if u < acc {
            return *kind;
        }
    }
    ALL_REGIMES[4]
}
