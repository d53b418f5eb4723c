//! Exploration-shaping rewards.
//!
//! Two intrinsic signals are derived from consecutive cluster posteriors:
//! an entropy-reduction reward (certain inference) and a negative-KL
//! consistency reward (stable inference). Temporal decay schedules blend
//! them into the environment reward so the exploration episode sweeps from
//! coarse cluster search to fine task search.

use serde::{Deserialize, Serialize};

/// Probabilities are clamped here before logs so degenerate posteriors
/// cannot produce infinities.
pub const PROB_FLOOR: f64 = 1e-8;

/// Decay schedule constants for the two intrinsic terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySchedule {
    #[serde(default = "default_a_h")]
    pub a_h: f64,
    #[serde(default = "default_b_h")]
    pub b_h: f64,
    #[serde(default = "default_s_h")]
    pub s_h: f64,
    #[serde(default = "default_a_c")]
    pub a_c: f64,
    #[serde(default = "default_b_c")]
    pub b_c: f64,
    #[serde(default = "default_s_c")]
    pub s_c: f64,
}

fn default_a_h() -> f64 {
    0.1
}
fn default_b_h() -> f64 {
    0.1
}
fn default_s_h() -> f64 {
    0.1
}
fn default_a_c() -> f64 {
    0.2
}
fn default_b_c() -> f64 {
    0.1
}
fn default_s_c() -> f64 {
    0.1
}

impl Default for DecaySchedule {
    fn default() -> Self {
        Self {
            a_h: default_a_h(),
            b_h: default_b_h(),
            s_h: default_s_h(),
            a_c: default_a_c(),
            b_c: default_b_c(),
            s_c: default_s_c(),
        }
    }
}

/// Entropy of a categorical distribution in nats.
pub fn entropy(q: &[f64]) -> f64 {
    -q.iter().map(|&p| { let p = p.max(PROB_FLOOR); p * p.ln() }).sum::<f64>()
}

/// KL(q_before || q_after) for categorical distributions, with floor
/// smoothing on both arguments.
pub fn categorical_kl(q_before: &[f64], q_after: &[f64]) -> f64 {
    assert_eq!(q_before.len(), q_after.len());
    q_before
        .iter()
        .zip(q_after.iter())
        .map(|(&p, &q)| {
            let p = p.max(PROB_FLOOR);
            let q = q.max(PROB_FLOOR);
            p * (p.ln() - q.ln())
        })
        .sum()
}

/// Reward for reducing cluster-inference entropy across one step.
pub fn reward_entropy_reduction(q_before: &[f64], q_after: &[f64]) -> f64 {
    entropy(q_before) - entropy(q_after)
}

/// Reward (always <= 0) for keeping cluster inference consistent.
pub fn reward_consistency(q_before: &[f64], q_after: &[f64]) -> f64 {
    -categorical_kl(q_before, q_after)
}

/// Weight of the entropy-reduction term at step `t` of an episode of
/// length `horizon`; decays to 0 at the end of the episode.
pub fn gamma_h(t: usize, horizon: usize, sched: &DecaySchedule) -> f64 {
    sched.b_h - sched.a_h * (-sched.s_h * (horizon - t) as f64).exp()
}

/// Weight of the consistency term at step `t`; negative early (try other
/// clusters), positive late (stick with the current one).
pub fn gamma_c(t: usize, horizon: usize, sched: &DecaySchedule) -> f64 {
    -sched.b_c + sched.a_c * (-sched.s_c * (horizon - t) as f64).exp()
}

/// Exploration-episode reward: environment reward plus decayed intrinsic
/// terms.
pub fn compose_exploration_reward(
    r_env: f64,
    r_h: f64,
    r_c: f64,
    t: usize,
    horizon: usize,
    sched: &DecaySchedule,
) -> f64 {
    r_env + gamma_h(t, horizon, sched) * r_h + gamma_c(t, horizon, sched) * r_c
}
