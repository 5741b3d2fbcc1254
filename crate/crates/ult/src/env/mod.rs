//! Toy "planar commander" environment: hidden randomized dynamics drive a
//! planar base whose velocity must track sampled commands. Observations are
//! split into proprioception (deployable) and privilege (simulation only).

pub mod command;
pub mod curriculum;
pub mod dynamics;
pub mod reward;
pub mod terrain;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::error::Result;
pub use command::{sample_command, Command};
pub use curriculum::{curriculum_update, TrackingTracker};
pub use dynamics::{randomize_dynamics, DynamicsParams, DYNAMICS_DIM};
pub use reward::{compute_reward, RewardInputs, RewardTerms};
pub use terrain::{sample_regime, RegimeKind, TerrainSpec, ALL_REGIMES};

pub const N_JOINTS: usize = 4;
pub const PROPRIO_DIM: usize = 17;
pub const PRIV_DIM: usize = DYNAMICS_DIM + 3 + 5;

const ROUGH_ACCEL: f64 = 6.0;

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = (a + std::f64::consts::PI) % two_pi;
    if x < 0.0 {
        x += two_pi;
    }
    x - std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base_velocity: [f64; 2],
    pub yaw_rate: f64,
    pub heading: f64,
    pub position: [f64; 2],
    pub joint_pos: [f64; 4],
    pub joint_vel: [f64; 4],
    pub gait_phase: f64,
    pub gravity_tilt: [f64; 3],
    pub foot_contacts: [bool; 2],
    /// Delay queue of commanded actions, most recent last.
    pub pending_actions: Vec<[f64; 4]>,
}

impl RobotState {
    pub fn zeroed() -> Self {
        Self {
            base_velocity: [0.0; 2],
            yaw_rate: 0.0,
            heading: 0.0,
            position: [0.0; 2],
            joint_pos: [0.0; 4],
            joint_vel: [0.0; 4],
            gait_phase: 0.0,
            gravity_tilt: [0.0, 0.0, -1.0],
            foot_contacts: [true, false],
            pending_actions: Vec::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base_velocity.iter().all(|v| v.is_finite())
            && self.yaw_rate.is_finite()
            && self.heading.is_finite()
            && self.position.iter().all(|v| v.is_finite())
            && self.joint_pos.iter().all(|v| v.is_finite())
            && self.joint_vel.iter().all(|v| v.is_finite())
    }
}

/// Deployable observation. Built from the robot state and command only;
/// carries no dynamics parameters, no base velocity, no terrain samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProprioObservation {
    pub joint_pos: [f64; 4],
    pub joint_vel: [f64; 4],
    pub yaw_rate: f64,
    pub gravity_tilt: [f64; 3],
    pub foot_contacts: [f64; 2],
    pub command: [f64; 3],
}

impl ProprioObservation {
    pub fn from_state(state: &RobotState, cmd: &Command) -> Self {
        Self {
            joint_pos: state.joint_pos,
            joint_vel: state.joint_vel,
            yaw_rate: state.yaw_rate,
            gravity_tilt: state.gravity_tilt,
            foot_contacts: [
                if state.foot_contacts[0] { 1.0 } else { 0.0 },
                if state.foot_contacts[1] { 1.0 } else { 0.0 },
            ],
            command: [cmd.v_x, cmd.v_y, cmd.omega_z],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PROPRIO_DIM);
        v.extend_from_slice(&self.joint_pos);
        v.extend_from_slice(&self.joint_vel);
        v.push(self.yaw_rate);
        v.extend_from_slice(&self.gravity_tilt);
        v.extend_from_slice(&self.foot_contacts);
        v.extend_from_slice(&self.command);
        v
    }
}

/// Simulation-only observation: e = [d, s, m].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivilegeObservation {
    pub dynamics: DynamicsParams,
    /// Ground-truth base velocity and heading.
    pub true_state: [f64; 3],
    pub terrain_samples: [f64; 5],
}

impl PrivilegeObservation {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PRIV_DIM);
        v.extend_from_slice(&self.dynamics.to_vec());
        v.extend_from_slice(&self.true_state);
        v.extend_from_slice(&self.terrain_samples);
        v
    }
}

pub struct StepResult {
    pub state: RobotState,
    pub proprio: ProprioObservation,
    pub privilege: PrivilegeObservation,
    pub reward_inputs: RewardInputs,
    pub collision: bool,
}

/// One control step: the commanded action runs through the delay queue and a
/// PD loop at `substeps` physics substeps, joint velocities generate drive
/// forces, and the planar base integrates under drag, slope and pushes.
#[allow(clippy::too_many_arguments)]
pub fn step<R: Rng>(
    state: &RobotState,
    action: [f64; 4],
    prev_action: [f64; 4],
    params: &DynamicsParams,
    terrain: &TerrainSpec,
    cmd: &Command,
    cfg: &EnvConfig,
    rng: &mut R,
    apply_push: bool,
) -> Result<StepResult> {
    for a in action {
        if !a.is_finite() {
            return Err(crate::error::UltError::EnvFault("non-finite action".into()));
        }
    }
    let mut s = state.clone();
    let dt = cfg.dt_ctrl / cfg.substeps as f64;
    let delay_steps = params.delay_steps(cfg.dt_ctrl);

    s.pending_actions.push(action);
    // zero action stands in until the queue has filled past the delay
    let a_star = if s.pending_actions.len() > delay_steps {
        s.pending_actions[s.pending_actions.len() - 1 - delay_steps]
    } else {
        [0.0; 4]
    };
    while s.pending_actions.len() > delay_steps + 1 {
        s.pending_actions.remove(0);
    }

    if apply_push {
        let scale = terrain.push_scale();
        s.base_velocity[0] += params.push_velocity[0] * scale;
        s.base_velocity[1] += params.push_velocity[1] * scale;
    }

    let qd_before = s.joint_vel;
    let mass = cfg.base_mass + params.payload_mass;
    let tau_limit = cfg.tau_max * params.motor_strength_scale;
    let rough = terrain.roughness();
    let mut work = 0.0;

    for _ in 0..cfg.substeps {
        let mut tau = [0.0; 4];
        for j in 0..4 {
            let err = wrap_angle(a_star[j] - s.joint_pos[j]);
            let t = params.kp_scale * cfg.kp * err - params.kd_scale * cfg.kd * s.joint_vel[j];
            tau[j] = t.clamp(-tau_limit, tau_limit);
        }
        for j in 0..4 {
            // unit joint inertia
            s.joint_vel[j] += tau[j] * dt;
            s.joint_pos[j] = wrap_angle(s.joint_pos[j] + s.joint_vel[j] * dt);
            work += (tau[j] * s.joint_vel[j]).abs() * dt;
        }
        let mut f = [0.0; 3];
        for (r, row) in f.iter_mut().zip(cfg.w_drive.iter()) {
            *r = row
                .iter()
                .zip(s.joint_vel.iter())
                .map(|(w, qd)| w * qd)
                .sum::<f64>()
                * params.motor_strength_scale;
        }
        let slope = terrain.slope();
        let ax = (f[0] - cfg.lin_drag * params.friction_scale * s.base_velocity[0]) / mass
            - params.gravity * slope;
        let ay = (f[1] - cfg.lin_drag * params.friction_scale * s.base_velocity[1]) / mass;
        s.base_velocity[0] += ax * dt;
        s.base_velocity[1] += ay * dt;
        if rough > 0.0 {
            s.base_velocity[0] += rough * ROUGH_ACCEL * rng.gen_range(-1.0..1.0) * dt;
            s.base_velocity[1] += rough * ROUGH_ACCEL * rng.gen_range(-1.0..1.0) * dt;
        }
        let yaw_bias = params.payload_mass * params.gravity * params.payload_com_offset * 0.05;
        let wdot = (f[2] + yaw_bias - cfg.yaw_drag * params.friction_scale * s.yaw_rate)
            / cfg.yaw_inertia;
        s.yaw_rate += wdot * dt;
        s.heading = wrap_angle(s.heading + s.yaw_rate * dt);
        s.position[0] += s.base_velocity[0] * dt;
        s.position[1] += s.base_velocity[1] * dt;
        let speed = (s.base_velocity[0].powi(2) + s.base_velocity[1].powi(2)).sqrt();
        s.gait_phase = {
            let p = s.gait_phase + cfg.gait_rate * (0.2 + speed) * dt;
            p % (2.0 * std::f64::consts::PI)
        };
    }

    let speed = (s.base_velocity[0].powi(2) + s.base_velocity[1].powi(2)).sqrt();
    let v_z = if rough > 0.0 {
        rough * (0.2 + speed) * rng.gen_range(-1.0..1.0)
    } else {
        0.0
    };
    s.foot_contacts = [s.gait_phase.sin() > 0.0, s.gait_phase.sin() <= 0.0];
    let slope = terrain.slope();
    let norm = (1.0 + slope * slope).sqrt();
    s.gravity_tilt = [slope / norm, 0.0, -1.0 / norm];

    let collision = !s.is_finite()
        || speed > cfg.crash_speed
        || s.position[0].abs() > cfg.arena_half_extent
        || s.position[1].abs() > cfg.arena_half_extent;

    let mut joint_accel = [0.0; 4];
    for j in 0..4 {
        joint_accel[j] = (s.joint_vel[j] - qd_before[j]) / cfg.dt_ctrl;
    }
    let foot_speed = [speed, speed];
    let reward_inputs = RewardInputs {
        cmd_v: [cmd.v_x, cmd.v_y],
        v: s.base_velocity,
        cmd_omega: cmd.omega_z,
        omega: s.yaw_rate,
        v_z,
        joint_accel,
        work,
        action,
        prev_action,
        foot_contacts: s.foot_contacts,
        foot_speed,
        collision,
    };
    let privilege = PrivilegeObservation {
        dynamics: *params,
        true_state: [s.base_velocity[0], s.base_velocity[1], s.heading],
        terrain_samples: terrain.sample_line(s.position[0], cfg.terrain_sample_spacing),
    };
    let proprio = ProprioObservation::from_state(&s, cmd);
    Ok(StepResult { state: s, proprio, privilege, reward_inputs, collision })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Done {
    Running,
    Timeout,
    Collision,
}

pub struct EnvStepOutcome {
    pub proprio: ProprioObservation,
    pub privilege: PrivilegeObservation,
    pub reward: RewardTerms,
    pub done: Done,
}

/// Stateful environment instance: owns its generator, command schedule,
/// episode bookkeeping and curriculum tracker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyEnv {
    rng: ChaCha8Rng,
    pub state: RobotState,
    pub params: DynamicsParams,
    pub terrain: TerrainSpec,
    pub command: Command,
    pub level: usize,
    pub step_index: usize,
    pub tracker: TrackingTracker,
    pub episode_return: f64,
    pub prev_action: [f64; 4],
}

impl ToyEnv {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: RobotState::zeroed(),
            params: DynamicsParams::nominal(),
            terrain: TerrainSpec::new(RegimeKind::SmoothSlope, 0),
            command: Command::zero(),
            level: 0,
            step_index: 0,
            tracker: TrackingTracker::default(),
            episode_return: 0.0,
            prev_action: [0.0; 4],
        }
    }

    /// Begin a new episode: redraw dynamics, regime and command.
    pub fn reset(&mut self, cfg: &EnvConfig) -> Result<ProprioObservation> {
        self.params = randomize_dynamics(&mut self.rng, &cfg.dr, cfg)?;
        let kind = sample_regime(&mut self.rng, cfg);
        self.terrain = TerrainSpec::new(kind, self.level);
        let mut s = RobotState::zeroed();
        for j in 0..4 {
            s.joint_pos[j] = self.rng.gen_range(-0.1..0.1);
        }
        s.gait_phase = self.rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        s.foot_contacts = [s.gait_phase.sin() > 0.0, s.gait_phase.sin() <= 0.0];
        let slope = self.terrain.slope();
        let norm = (1.0 + slope * slope).sqrt();
        s.gravity_tilt = [slope / norm, 0.0, -1.0 / norm];
        self.state = s;
        self.command = sample_command(&mut self.rng, self.state.heading, cfg);
        self.step_index = 0;
        self.tracker.reset();
        self.episode_return = 0.0;
        self.prev_action = [0.0; 4];
        Ok(ProprioObservation::from_state(&self.state, &self.command))
    }

    /// Reset into a specific regime and level (evaluation).
    pub fn reset_with(
        &mut self,
        cfg: &EnvConfig,
        kind: RegimeKind,
        level: usize,
    ) -> Result<ProprioObservation> {
        self.level = level;
        let _ = self.reset(cfg)?;
        self.terrain = TerrainSpec::new(kind, level);
        let slope = self.terrain.slope();
        let norm = (1.0 + slope * slope).sqrt();
        self.state.gravity_tilt = [slope / norm, 0.0, -1.0 / norm];
        Ok(ProprioObservation::from_state(&self.state, &self.command))
    }

    /// Current privilege observation, available before the first step.
    pub fn privilege(&self, cfg: &EnvConfig) -> PrivilegeObservation {
        PrivilegeObservation {
            dynamics: self.params,
            true_state: [
                self.state.base_velocity[0],
                self.state.base_velocity[1],
                self.state.heading,
            ],
            terrain_samples: self
                .terrain
                .sample_line(self.state.position[0], cfg.terrain_sample_spacing),
        }
    }

    pub fn step(&mut self, action: [f64; 4], cfg: &EnvConfig) -> Result<EnvStepOutcome> {
        let cmd_steps = cfg.command_interval_steps();
        if self.step_index > 0 && self.step_index % cmd_steps == 0 {
            self.command = sample_command(&mut self.rng, self.state.heading, cfg);
        }
        let push_steps = cfg.push_interval_steps();
        let apply_push = self.step_index > 0 && self.step_index % push_steps == 0;
        let result = step(
            &self.state,
            action,
            self.prev_action,
            &self.params,
            &self.terrain,
            &self.command,
            cfg,
            &mut self.rng,
            apply_push,
        )?;
        let reward = compute_reward(&result.reward_inputs, &cfg.reward);
        self.state = result.state;
        self.prev_action = action;
        self.tracker.add(reward.lin_tracking_weighted());
        self.episode_return += reward.total;
        self.step_index += 1;
        let done = if result.collision {
            Done::Collision
        } else if self.step_index >= cfg.episode_steps() {
            Done::Timeout
        } else {
            Done::Running
        };
        Ok(EnvStepOutcome { proprio: result.proprio, privilege: result.privilege, reward, done })
    }

    /// Apply the curriculum rule to this instance's episode outcome.
    pub fn update_curriculum(&mut self, cfg: &EnvConfig) {
        let frac = self.tracker.fraction(cfg);
        self.level = curriculum_update(frac, self.level, cfg);
    }
}
