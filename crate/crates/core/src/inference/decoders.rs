//! Reward and state decoders for trajectory reconstruction.
//!
//! The decoders score how well a latent task sample explains a whole trial:
//! squared reward-prediction error plus an optionally weighted squared
//! state-prediction error stand in for the reconstruction log-likelihood up
//! to additive constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{Mlp, MlpVars};
use crate::tensor::Tensor;
use crate::trajectory::Trial;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decoders {
    /// (s, a, s', z) -> predicted reward.
    pub reward: Mlp,
    /// (s, a, z) -> predicted next state.
    pub state: Mlp,
    /// Weight of the state term; 0 for reward-clustered environments,
    /// 1 for dynamics-clustered ones.
    pub lambda_state: f64,
}

impl Decoders {
    pub fn new(latent_dim: usize, hidden: usize, lambda_state: f64, rng: &mut impl Rng) -> Self {
        Self {
            reward: Mlp::new(&[6 + latent_dim, hidden, 1], rng),
            state: Mlp::new(&[4 + latent_dim, hidden, 2], rng),
            lambda_state,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.reward.tensors();
        out.extend(self.state.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.reward.tensors_mut();
        out.extend(self.state.tensors_mut());
        out
    }

    pub fn inject(&self, g: &mut Graph, trainable: bool) -> DecoderVars {
        DecoderVars {
            reward: self.reward.inject(g, trainable),
            state: self.state.inject(g, trainable),
            lambda_state: self.lambda_state,
        }
    }
}

#[derive(Clone)]
pub struct DecoderVars {
    pub reward: MlpVars,
    pub state: MlpVars,
    pub lambda_state: f64,
}

impl DecoderVars {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = self.reward.vars();
        out.extend(self.state.vars());
        out
    }
}

/// Decode inputs and targets for one trial, shaped for batched decoding.
#[derive(Debug, Clone)]
pub struct TrialTargets {
    /// (s, a, s') rows, L x 6.
    pub reward_in: Tensor,
    /// (s, a) rows, L x 4.
    pub state_in: Tensor,
    /// Observed rewards, L x 1.
    pub rewards: Tensor,
    /// Observed next states, L x 2.
    pub next_states: Tensor,
}

impl TrialTargets {
    pub fn from_trial(trial: &Trial) -> Self {
        let len = trial.total_len();
        let mut reward_in = Tensor::zeros(len, 6);
        let mut state_in = Tensor::zeros(len, 4);
        let mut rewards = Tensor::zeros(len, 1);
        let mut next_states = Tensor::zeros(len, 2);
        for (i, t) in trial.steps().enumerate() {
            let r6 = [t.state[0], t.state[1], t.action[0], t.action[1], t.next_state[0], t.next_state[1]];
            reward_in.data[i * 6..(i + 1) * 6].copy_from_slice(&r6);
            let s4 = [t.state[0], t.state[1], t.action[0], t.action[1]];
            state_in.data[i * 4..(i + 1) * 4].copy_from_slice(&s4);
            rewards.data[i] = t.reward;
            next_states.data[i * 2..(i + 1) * 2].copy_from_slice(&t.next_state);
        }
        Self { reward_in, state_in, rewards, next_states }
    }

    pub fn inject(&self, g: &mut Graph) -> TrialTargetVars {
        TrialTargetVars {
            len: self.rewards.rows,
            reward_in: g.constant(self.reward_in.clone()),
            state_in: g.constant(self.state_in.clone()),
            rewards: g.constant(self.rewards.clone()),
            next_states: g.constant(self.next_states.clone()),
        }
    }
}

#[derive(Clone, Copy)]
pub struct TrialTargetVars {
    pub len: usize,
    pub reward_in: Var,
    pub state_in: Var,
    pub rewards: Var,
    pub next_states: Var,
}

/// Squared reconstruction error of the whole trial under latent sample `z`
/// (a `1 x d_z` node): sum of squared reward residuals plus
/// `lambda_state` times squared state residuals.
pub fn reconstruction_sq(
    g: &mut Graph,
    dec: &DecoderVars,
    targets: &TrialTargetVars,
    z: Var,
) -> Var {
    let z_rows = g.repeat_rows(z, targets.len);
    let rin = g.concat_cols(targets.reward_in, z_rows);
    let rhat = dec.reward.forward(g, rin);
    let r_residual = g.sub(rhat, targets.rewards);
    let r_sq = g.square(r_residual);
    let mut total = g.sum(r_sq);
    if dec.lambda_state != 0.0 {
        let z_rows_s = g.repeat_rows(z, targets.len);
        let sin = g.concat_cols(targets.state_in, z_rows_s);
        let shat = dec.state.forward(g, sin);
        let s_residual = g.sub(shat, targets.next_states);
        let s_sq = g.square(s_residual);
        let s_sum = g.sum(s_sq);
        let weighted = g.scale(s_sum, dec.lambda_state);
        total = g.add(total, weighted);
    }
    total
}

/// Reconstruction loss of `trial` under latent `z`; the negated
/// reconstruction log-likelihood up to additive constants.
pub fn reconstruction_loss(dec: &Decoders, trial: &Trial, z: &[f64]) -> f64 {
    let targets = TrialTargets::from_trial(trial);
    let mut g = Graph::forward_only();
    let dv = dec.inject(&mut g, false);
    let tv = targets.inject(&mut g);
    let zv = g.constant(Tensor::row(z));
    let loss = reconstruction_sq(&mut g, &dv, &tv, zv);
    g.value(loss).data[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::trajectory::{Trajectory, Transition};

    fn tiny_trial() -> Trial {
        let t = |i: f64| Transition {
            state: [0.1 * i, -0.1 * i],
            action: [0.05, -0.02],
            reward: -1.0 + 0.1 * i,
            next_state: [0.1 * (i + 1.0), -0.1 * (i + 1.0)],
        };
        Trial {
            task_id: 0,
            cluster_id: 0,
            episodes: vec![
                Trajectory { transitions: (0..4).map(|i| t(i as f64)).collect() },
                Trajectory { transitions: (4..8).map(|i| t(i as f64)).collect() },
            ],
        }
    }

    #[test]
    fn perfect_decoders_give_zero_loss() {
        // Zero-weight MLPs predict the biases; set targets to match them.
        let mut rng = stream(0, "dec", 0);
        let mut dec = Decoders::new(2, 4, 1.0, &mut rng);
        for t in dec.tensors_mut() {
            for x in t.data.iter_mut() {
                *x = 0.0;
            }
        }
        let mut trial = tiny_trial();
        for ep in trial.episodes.iter_mut() {
            for tr in ep.transitions.iter_mut() {
                tr.reward = 0.0;
                tr.next_state = [0.0, 0.0];
            }
        }
        let loss = reconstruction_loss(&dec, &trial, &[0.0, 0.0]);
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn zero_state_weight_ignores_state_residuals() {
        let mut rng = stream(1, "dec", 0);
        let mut dec = Decoders::new(2, 4, 0.0, &mut rng);
        let trial = tiny_trial();
        let base = reconstruction_loss(&dec, &trial, &[0.3, -0.2]);
        // perturbing the state decoder must not change the loss
        dec.state.layers[0].w.data[0] += 10.0;
        let perturbed = reconstruction_loss(&dec, &trial, &[0.3, -0.2]);
        assert_eq!(base, perturbed);

        dec.lambda_state = 1.0;
        let with_state = reconstruction_loss(&dec, &trial, &[0.3, -0.2]);
        assert!(with_state > base);
    }

    #[test]
    fn loss_is_sum_of_squared_residuals() {
        let mut rng = stream(2, "dec", 0);
        let dec = Decoders::new(2, 4, 0.7, &mut rng);
        let trial = tiny_trial();
        let z = [0.1, 0.9];
        let got = reconstruction_loss(&dec, &trial, &z);

        // recompute by hand with plain forwards
        let mut want = 0.0;
        for t in trial.steps() {
            let rin = Tensor::row(&[
                t.state[0], t.state[1], t.action[0], t.action[1], t.next_state[0],
                t.next_state[1], z[0], z[1],
            ]);
            let rhat = dec.reward.forward_plain(&rin).data[0];
            want += (rhat - t.reward) * (rhat - t.reward);
            let sin = Tensor::row(&[t.state[0], t.state[1], t.action[0], t.action[1], z[0], z[1]]);
            let shat = dec.state.forward_plain(&sin);
            let ds = [shat.data[0] - t.next_state[0], shat.data[1] - t.next_state[1]];
            want += 0.7 * (ds[0] * ds[0] + ds[1] * ds[1]);
        }
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}
