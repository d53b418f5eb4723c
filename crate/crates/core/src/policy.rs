//! Gaussian actor-critic policies conditioned on the inferred task latent.
//!
//! Both the exploration and exploitation policies share this shape: an MLP
//! maps (state, latent sample, cluster probabilities) to an action mean,
//! a learnable log-std provides the spread, and a twin MLP estimates state
//! values for advantage computation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{Mlp, MlpVars};
use crate::rng;
use crate::tensor::Tensor;

pub const ACTION_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Initial exploration spread, matched to the environment action limit.
const LOG_STD_INIT: f64 = -2.3;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    64
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { hidden: default_hidden() }
    }
}

/// Policy input: robot position, latent task sample, cluster posterior.
pub fn policy_features(state: [f64; 2], z: &[f64], cluster_probs: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 + z.len() + cluster_probs.len());
    f.extend_from_slice(&state);
    f.extend_from_slice(z);
    f.extend_from_slice(cluster_probs);
    f
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub actor: Mlp,
    pub log_std: Tensor, // 1 x ACTION_DIM, clamped to [LOG_STD_MIN, LOG_STD_MAX]
    pub critic: Mlp,
}

#[derive(Debug, Clone)]
pub struct ActionSample {
    pub action: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
}

impl GaussianPolicy {
    pub fn new(input_dim: usize, cfg: &PolicyConfig, rng: &mut impl Rng) -> Self {
        let mut actor = Mlp::new(&[input_dim, cfg.hidden, cfg.hidden, ACTION_DIM], rng);
        // Small output head: initial action means stay inside the action
        // clip, so early reward differences trace back to the sampled noise.
        if let Some(head) = actor.layers.last_mut() {
            for w in head.w.data.iter_mut() {
                *w *= 0.01;
            }
        }
        Self {
            actor,
            log_std: Tensor::full(1, ACTION_DIM, LOG_STD_INIT),
            critic: Mlp::new(&[input_dim, cfg.hidden, cfg.hidden, 1], rng),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.actor.tensors();
        out.push(&self.log_std);
        out.extend(self.critic.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.actor.tensors_mut();
        out.push(&mut self.log_std);
        out.extend(self.critic.tensors_mut());
        out
    }

    pub fn inject(&self, g: &mut Graph, trainable: bool) -> PolicyVars {
        let log_std =
            if trainable { g.input(self.log_std.clone()) } else { g.constant(self.log_std.clone()) };
        PolicyVars {
            actor: self.actor.inject(g, trainable),
            log_std,
            critic: self.critic.inject(g, trainable),
        }
    }

    fn clamped_log_std(&self) -> [f64; ACTION_DIM] {
        [
            self.log_std.data[0].clamp(LOG_STD_MIN, LOG_STD_MAX),
            self.log_std.data[1].clamp(LOG_STD_MIN, LOG_STD_MAX),
        ]
    }

    /// Samples an action and records the statistics PPO needs.
    pub fn act(&self, features: &[f64], rng: &mut impl Rng) -> ActionSample {
        let feat = Tensor::row(features);
        let mean = self.actor.forward_plain(&feat);
        let ls = self.clamped_log_std();
        let mut action = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            action[i] = mean.data[i] + ls[i].exp() * rng::standard_normal(rng);
        }
        let log_prob = self.log_prob_plain(&mean, ls, action);
        let value = self.critic.forward_plain(&feat).data[0];
        ActionSample { action, log_prob, value }
    }

    /// Mean action (no sampling) plus value, for probing behavior.
    pub fn mean_action(&self, features: &[f64]) -> [f64; 2] {
        let mean = self.actor.forward_plain(&Tensor::row(features));
        [mean.data[0], mean.data[1]]
    }

    fn log_prob_plain(&self, mean: &Tensor, ls: [f64; ACTION_DIM], action: [f64; 2]) -> f64 {
        let mut lp = -(ACTION_DIM as f64) * 0.5 * LN_2PI;
        for i in 0..ACTION_DIM {
            let zi = (action[i] - mean.data[i]) * (-ls[i]).exp();
            lp += -0.5 * zi * zi - ls[i];
        }
        lp
    }

    /// Log-probability and value of a recorded step under the current
    /// parameters; mirrors the graph computation in the PPO update.
    pub fn evaluate_plain(&self, features: &[f64], action: [f64; 2]) -> (f64, f64) {
        let feat = Tensor::row(features);
        let mean = self.actor.forward_plain(&feat);
        let lp = self.log_prob_plain(&mean, self.clamped_log_std(), action);
        let value = self.critic.forward_plain(&feat).data[0];
        (lp, value)
    }
}

#[derive(Clone)]
pub struct PolicyVars {
    pub actor: MlpVars,
    pub log_std: Var,
    pub critic: MlpVars,
}

impl PolicyVars {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = self.actor.vars();
        out.push(self.log_std);
        out.extend(self.critic.vars());
        out
    }

    /// Row-wise log-probabilities of `actions` (B x 2 const) under the
    /// current actor, plus the policy entropy (scalar).
    pub fn log_prob_rows(&self, g: &mut Graph, features: Var, actions: Var) -> (Var, Var) {
        let batch = g.value(features).rows;
        let mean = self.actor.forward(g, features);
        let ls = g.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX);
        let neg_ls = g.neg(ls);
        let inv_std = g.exp(neg_ls);
        let inv_std_rows = g.repeat_rows(inv_std, batch);
        let diff = g.sub(actions, mean);
        let zs = g.mul(diff, inv_std_rows);
        let zs2 = g.square(zs);
        let quad = g.sum_rows(zs2);
        let half_quad = g.scale(quad, -0.5);
        let sum_ls = g.sum(ls);
        let neg_sum_ls = g.neg(sum_ls);
        let shifted = g.add_row(half_quad, neg_sum_ls);
        let log_prob = g.add_scalar(shifted, -(ACTION_DIM as f64) * 0.5 * LN_2PI);
        // diagonal Gaussian entropy: sum(log_std) + d/2 (1 + ln 2pi)
        let entropy = g.add_scalar(sum_ls, (ACTION_DIM as f64) * 0.5 * (1.0 + LN_2PI));
        (log_prob, entropy)
    }

    pub fn value_rows(&self, g: &mut Graph, features: Var) -> Var {
        self.critic.forward(g, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn recorded_and_recomputed_log_probs_agree() {
        let mut rng = stream(0, "policy", 0);
        let policy = GaussianPolicy::new(6, &PolicyConfig::default(), &mut rng);
        let features = vec![0.3, -0.1, 0.5, 0.0, 0.2, 0.05];
        let s = policy.act(&features, &mut rng);
        let (lp, v) = policy.evaluate_plain(&features, s.action);
        assert!((lp - s.log_prob).abs() < 1e-12);
        assert!((v - s.value).abs() < 1e-12);
    }

    #[test]
    fn graph_log_prob_matches_plain() {
        let mut rng = stream(1, "policy", 0);
        let policy = GaussianPolicy::new(4, &PolicyConfig::default(), &mut rng);
        let feats = [vec![0.1, 0.2, -0.4, 0.9], vec![-0.3, 0.0, 0.6, -0.2]];
        let acts = [[0.05, -0.02], [-0.01, 0.03]];

        let mut g = Graph::forward_only();
        let pv = policy.inject(&mut g, false);
        let f = g.constant(Tensor::new(2, 4, feats.concat()));
        let a = g.constant(Tensor::new(2, 2, acts.concat().to_vec()));
        let (lp, _) = pv.log_prob_rows(&mut g, f, a);
        let vals = pv.value_rows(&mut g, f);

        for i in 0..2 {
            let (plain_lp, plain_v) = policy.evaluate_plain(&feats[i], acts[i]);
            assert!((g.value(lp).data[i] - plain_lp).abs() < 1e-12);
            assert!((g.value(vals).data[i] - plain_v).abs() < 1e-12);
        }
    }

    #[test]
    fn log_std_is_clamped_into_bounds() {
        let mut rng = stream(2, "policy", 0);
        let mut policy = GaussianPolicy::new(4, &PolicyConfig::default(), &mut rng);
        policy.log_std = Tensor::row(&[-9.0, 9.0]);
        let features = vec![0.0, 0.0, 0.0, 0.0];
        let s = policy.act(&features, &mut rng);
        // log-prob computed with clamped stds stays finite and uses bounds
        assert!(s.log_prob.is_finite());
        let (lp, _) = policy.evaluate_plain(&features, s.action);
        assert!((lp - s.log_prob).abs() < 1e-12);
    }

    #[test]
    fn features_concatenate_in_declared_order() {
        let f = policy_features([1.0, 2.0], &[3.0, 4.0], &[0.5, 0.5]);
        assert_eq!(f, vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.5]);
    }
}
