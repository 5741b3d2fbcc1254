//! Global run configuration, loaded from a single TOML file with sections
//! `env`, `net`, `train`, `mixer`, `losses`, `eval`. Unknown keys are errors.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, UltError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.low > self.high || !self.low.is_finite() || !self.high.is_finite() {
            return Err(UltError::Config(format!(
                "range {name} inverted or non-finite: [{}, {}]",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Domain-randomization ranges for the hidden dynamics parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrRanges {
    pub kp_scale: Range,
    pub kd_scale: Range,
    pub friction_scale: Range,
    pub motor_strength_scale: Range,
    pub payload_mass: Range,
    pub payload_com_offset: Range,
    pub gravity: Range,
    pub system_delay: Range,
    pub push_velocity: Range,
}

impl Default for DrRanges {
    fn default() -> Self {
        Self {
            kp_scale: Range::new(0.9, 1.1),
            kd_scale: Range::new(0.9, 1.1),
            friction_scale: Range::new(0.7, 1.3),
            motor_strength_scale: Range::new(0.9, 1.1),
            payload_mass: Range::new(0.0, 5.0),
            payload_com_offset: Range::new(-0.1, 0.1),
            gravity: Range::new(9.41, 10.21),
            system_delay: Range::new(0.0, 0.015),
            push_velocity: Range::new(-1.0, 1.0),
        }
    }
}

impl DrRanges {
    pub fn validate(&self) -> Result<()> {
        self.kp_scale.validate("kp_scale")?;
        self.kd_scale.validate("kd_scale")?;
        self.friction_scale.validate("friction_scale")?;
        self.motor_strength_scale.validate("motor_strength_scale")?;
        self.payload_mass.validate("payload_mass")?;
        self.payload_com_offset.validate("payload_com_offset")?;
        self.gravity.validate("gravity")?;
        self.system_delay.validate("system_delay")?;
        self.push_velocity.validate("push_velocity")?;
        Ok(())
    }
}

/// Per-term reward weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardScales {
    pub lin_tracking: f64,
    pub ang_tracking: f64,
    pub body_z_vel: f64,
    pub body_rotation: f64,
    pub joint_accel: f64,
    pub output_work: f64,
    pub action_rate: f64,
    pub feet_slip: f64,
    pub collision: f64,
}

impl Default for RewardScales {
    fn default() -> Self {
        Self {
            lin_tracking: 1.0,
            ang_tracking: 0.5,
            body_z_vel: -2.0,
            body_rotation: -0.05,
            joint_accel: -2.5e-7,
            output_work: -2.0e-5,
            action_rate: -0.05,
            feet_slip: -0.1,
            collision: -1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dr: DrRanges,
    pub reward: RewardScales,
    /// Linear command magnitude bound, m/s.
    pub max_lin_command: f64,
    /// Angular command cap, rad/s.
    pub max_ang_command: f64,
    /// Heading-error to yaw-rate command gain.
    pub heading_gain: f64,
    /// Command resample interval, seconds.
    pub command_interval_s: f64,
    /// Control period, seconds (policy frequency).
    pub dt_ctrl: f64,
    /// Physics substeps per control step.
    pub substeps: usize,
    pub kp: f64,
    pub kd: f64,
    pub tau_max: f64,
    pub base_mass: f64,
    pub lin_drag: f64,
    pub yaw_drag: f64,
    pub yaw_inertia: f64,
    /// Rows map joint velocities to (f_x, f_y, yaw torque).
    pub w_drive: [[f64; 4]; 3],
    /// Gait phase rate per unit speed, rad/s.
    pub gait_rate: f64,
    /// Push impulse schedule, seconds.
    pub push_interval_s: f64,
    pub episode_s: f64,
    /// Base speed above which the episode counts as a crash.
    pub crash_speed: f64,
    pub arena_half_extent: f64,
    /// Sampling proportions for the five terrain regimes.
    pub regime_proportions: [f64; 5],
    pub max_level: usize,
    pub promote_fraction: f64,
    pub demote_fraction: f64,
    /// Spacing of the 5 forward terrain samples, m.
    pub terrain_sample_spacing: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dr: DrRanges::default(),
            reward: RewardScales::default(),
            max_lin_command: 0.5,
            max_ang_command: 0.5,
            heading_gain: 1.0,
            command_interval_s: 10.0,
            dt_ctrl: 0.02,
            substeps: 4,
            kp: 30.0,
            kd: 0.7,
            tau_max: 20.0,
            base_mass: 1.0,
            lin_drag: 1.0,
            yaw_drag: 1.0,
            yaw_inertia: 1.0,
            w_drive: [
                [0.5, 0.5, 0.0, 0.0],
                [0.0, 0.0, 0.5, 0.5],
                [0.25, -0.25, 0.25, -0.25],
            ],
            gait_rate: 6.0,
            push_interval_s: 5.0,
            episode_s: 20.0,
            crash_speed: 3.0,
            arena_half_extent: 25.0,
            regime_proportions: [0.1, 0.1, 0.35, 0.25, 0.2],
            max_level: 9,
            promote_fraction: 0.8,
            demote_fraction: 0.25,
            terrain_sample_spacing: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn episode_steps(&self) -> usize {
        (self.episode_s / self.dt_ctrl).round() as usize
    }

    pub fn command_interval_steps(&self) -> usize {
        (self.command_interval_s / self.dt_ctrl).round() as usize
    }

    pub fn push_interval_steps(&self) -> usize {
        (self.push_interval_s / self.dt_ctrl).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.dr.validate()?;
        if self.substeps == 0 || self.dt_ctrl <= 0.0 || self.episode_s <= 0.0 {
            return Err(UltError::Config("invalid env timing".into()));
        }
        let p: f64 = self.regime_proportions.iter().sum();
        if (p - 1.0).abs() > 1e-9 {
            return Err(UltError::Config(format!(
                "regime proportions must sum to 1, got {p}"
            )));
        }
        if !(0.0..=1.0).contains(&self.demote_fraction)
            || !(0.0..=1.0).contains(&self.promote_fraction)
            || self.demote_fraction >= self.promote_fraction
        {
            return Err(UltError::Config("invalid curriculum thresholds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Token embedding width d.
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Per-step observation dimension m.
    pub obs_dim: usize,
    /// Action dimension n.
    pub act_dim: usize,
    /// Rolling window length t.
    pub window: usize,
    pub priv_dim: usize,
    pub priv_hidden: [usize; 2],
    pub teacher_hidden: [usize; 2],
    pub value_hidden: usize,
    /// Running mean/std normalization of tokens before projection.
    pub obs_norm: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            obs_dim: 17,
            act_dim: 4,
            window: 15,
            priv_dim: 18,
            priv_hidden: [256, 128],
            teacher_hidden: [128, 64],
            value_hidden: 64,
            obs_norm: false,
        }
    }
}

impl NetConfig {
    pub fn token_dim(&self) -> usize {
        self.obs_dim + self.act_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(UltError::Config(
                "embed_dim must be positive and divisible by heads".into(),
            ));
        }
        if self.layers == 0
            || self.ff_dim == 0
            || self.obs_dim == 0
            || self.act_dim == 0
            || self.window == 0
            || self.priv_dim == 0
        {
            return Err(UltError::Config("net dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduler {
    AdaptiveKl,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub agents: usize,
    pub horizon: usize,
    pub mini_epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub scheduler: Scheduler,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub desired_kl: f64,
    pub weight_decay: f64,
    pub total_updates: usize,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub cosine_final_lr: f64,
    /// Critic reads the privilege-token encoding; disable for the
    /// proprio-only critic used by the plain PPO baseline.
    pub privileged_critic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            agents: 256,
            horizon: 24,
            mini_epochs: 5,
            minibatch: 1536,
            learning_rate: 3e-3,
            scheduler: Scheduler::AdaptiveKl,
            gamma: 0.99,
            gae_lambda: 0.95,
            desired_kl: 0.008,
            weight_decay: 0.01,
            total_updates: 300,
            seed: 0,
            checkpoint_interval: 50,
            lr_min: 1e-6,
            lr_max: 1e-2,
            cosine_final_lr: 3e-5,
            privileged_critic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.horizon == 0 || self.mini_epochs == 0 || self.minibatch == 0 {
            return Err(UltError::Config("train sizes must be positive".into()));
        }
        if (self.agents * self.horizon) % self.minibatch != 0 {
            return Err(UltError::Config(format!(
                "minibatch {} must divide horizon*agents {}",
                self.minibatch,
                self.agents * self.horizon
            )));
        }
        if self.learning_rate <= 0.0 || self.gamma < 0.0 || self.gamma > 1.0 {
            return Err(UltError::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    /// Teacher mix ratio alpha.
    pub alpha: f64,
    /// Mask resample period in control steps; defaults to one rollout horizon.
    pub resample_period: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            resample_period: 24,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(UltError::Config(format!(
                "alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Imitation weight beta.
    pub beta: f64,
    /// Transformer-loss weight lambda.
    pub lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub clip_range: f64,
    /// Disable the next-prediction term (ablation switch).
    pub next_pred_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 1.0,
            value_coef: 1.0,
            entropy_coef: 0.005,
            clip_range: 0.2,
            next_pred_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_range <= 0.0 {
            return Err(UltError::Config("clip_range must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Highest terrain level sampled during evaluation.
    pub max_eval_level: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            seed: 7,
            max_eval_level: 3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub env: EnvConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub mixer: MixerConfig,
    pub losses: LossConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| UltError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.mixer.validate()?;
        self.losses.validate()?;
        Ok(())
    }
}
