//! 2D point-robot environments realizing each [`TaskSpec`].
//!
//! All families share the same interface: the robot starts at the origin,
//! actions are clipped to a per-component limit, episodes run a fixed
//! horizon. Goal families move the robot by the clipped action and pay a
//! dense L2 or sparse L1 goal reward; the dynamics family distorts the
//! action (gain, rotation, drift, control noise) according to the cluster's
//! parameter set while every task shares one fixed goal, so only the
//! transition function distinguishes tasks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tasks::{TaskKind, TaskSpec};
use crate::trajectory::{Trajectory, Transition};

/// Unit scales translating a dynamics multiplier into a perturbation.
/// The unperturbed values are gain 1, rotation 0, drift 0, noise 0.
pub const ROTATION_UNIT: f64 = 0.15; // radians per multiplier unit
pub const DRIFT_UNIT: f64 = 0.01; // length units per step per multiplier unit
pub const NOISE_UNIT: f64 = 0.01; // action std per multiplier unit

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Episode length H.
    pub horizon: usize,
    /// Per-component action clip.
    #[serde(default = "default_action_limit")]
    pub action_limit: f64,
    /// Quadratic control cost weight for dense goal rewards.
    #[serde(default = "default_ctrl_cost")]
    pub ctrl_cost_weight: f64,
}

fn default_action_limit() -> f64 {
    0.1
}
fn default_ctrl_cost() -> f64 {
    0.01
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            action_limit: default_action_limit(),
            ctrl_cost_weight: default_ctrl_cost(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub step_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step after episode end (step {step} of horizon {horizon})")]
    EpisodeOverrun { step: usize, horizon: usize },
    #[error("policy failure: {0}")]
    Policy(String),
}

/// Fixed goal shared by all dynamics-family tasks.
pub fn dynamics_shared_goal(radius: f64) -> [f64; 2] {
    [radius, 0.0]
}

/// A point-robot instance bound to one task. Holds the episode counter so
/// that control-noise streams are a pure function of (task, episode).
pub struct PointEnv {
    pub task: TaskSpec,
    pub cfg: EnvConfig,
    state: EnvState,
    episodes_started: u64,
    noise: ChaCha8Rng,
}

impl PointEnv {
    pub fn new(task: TaskSpec, cfg: EnvConfig) -> Self {
        let noise = rng::stream(task.task_id, "env-noise", 0);
        Self {
            task,
            cfg,
            state: EnvState { position: [0.0, 0.0], step_index: 0 },
            episodes_started: 0,
            noise,
        }
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    pub fn reset(&mut self) -> EnvState {
        self.state = EnvState { position: [0.0, 0.0], step_index: 0 };
        self.noise = rng::stream(self.task.task_id, "env-noise", self.episodes_started);
        self.episodes_started += 1;
        self.state
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<StepResult, EnvError> {
        let result = step_task(&self.task, &self.cfg, &self.state, action, &mut self.noise)?;
        self.state = result.next_state;
        Ok(result)
    }
}

/// Pure single-step transition for `task` from `s` under `action`.
/// `noise` is only consulted by dynamics tasks with a control-noise set.
pub fn step_task(
    task: &TaskSpec,
    cfg: &EnvConfig,
    s: &EnvState,
    action: [f64; 2],
    noise: &mut impl Rng,
) -> Result<StepResult, EnvError> {
    if s.step_index >= cfg.horizon {
        return Err(EnvError::EpisodeOverrun { step: s.step_index, horizon: cfg.horizon });
    }
    let lim = cfg.action_limit;
    let a = [action[0].clamp(-lim, lim), action[1].clamp(-lim, lim)];

    let (position, reward) = match &task.kind {
        TaskKind::Goal { goal, sparse_threshold } => {
            let p = [s.position[0] + a[0], s.position[1] + a[1]];
            let reward = match sparse_threshold {
                None => {
                    let dist = ((p[0] - goal[0]).powi(2) + (p[1] - goal[1]).powi(2)).sqrt();
                    let ctrl = cfg.ctrl_cost_weight * (a[0] * a[0] + a[1] * a[1]);
                    -dist - ctrl
                }
                Some(t) => {
                    let l1 = (p[0] - goal[0]).abs() + (p[1] - goal[1]).abs();
                    if l1 <= *t {
                        -l1 + t
                    } else {
                        0.0
                    }
                }
            };
            (p, reward)
        }
        TaskKind::Dynamics { param_set, multipliers } => {
            let mut gain = 1.0;
            let mut rot = 0.0;
            let mut drift = [0.0, 0.0];
            let mut noise_std = 0.0;
            match param_set {
                0 => gain = multipliers[0],
                1 => rot = ROTATION_UNIT * multipliers[0],
                2 => drift = [DRIFT_UNIT * multipliers[0], DRIFT_UNIT * multipliers[1]],
                _ => noise_std = NOISE_UNIT * multipliers[0],
            }
            let (sin, cos) = rot.sin_cos();
            let mut eff = [
                gain * (cos * a[0] - sin * a[1]) + drift[0],
                gain * (sin * a[0] + cos * a[1]) + drift[1],
            ];
            if noise_std > 0.0 {
                eff[0] += rng::normal(noise, 0.0, noise_std);
                eff[1] += rng::normal(noise, 0.0, noise_std);
            }
            let p = [s.position[0] + eff[0], s.position[1] + eff[1]];
            let goal = dynamics_shared_goal(2.0);
            let dist = ((p[0] - goal[0]).powi(2) + (p[1] - goal[1]).powi(2)).sqrt();
            (p, -dist)
        }
    };

    let next_state = EnvState { position, step_index: s.step_index + 1 };
    let done = next_state.step_index == cfg.horizon;
    Ok(StepResult { next_state, reward, done })
}

/// Rolls one full episode of exactly H transitions under `policy`.
pub fn run_episode(
    env: &mut PointEnv,
    mut policy: impl FnMut(&EnvState) -> Result<[f64; 2], EnvError>,
) -> Result<Trajectory, EnvError> {
    let mut state = env.reset();
    let mut transitions = Vec::with_capacity(env.cfg.horizon);
    loop {
        let action = policy(&state)?;
        let result = env.step(action)?;
        transitions.push(Transition {
            state: state.position,
            action,
            reward: result.reward,
            next_state: result.next_state.position,
        });
        state = result.next_state;
        if result.done {
            break;
        }
    }
    Ok(Trajectory { transitions })
}
