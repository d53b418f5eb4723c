//! Stacked recurrent trajectory encoder for cluster and task inference.
//!
//! Two GRUs read the interaction history at different granularities: the
//! cluster-level RNN feeds cluster inference, and its output joins the
//! transition embedding as input to the task-level RNN that feeds task
//! inference. Hidden state carries across episodes within a trial. In
//! single-RNN mode (an ablation) one GRU feeds both heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{softmax_tensor, Graph, Var};
use crate::inference::InferenceConfig;
use crate::nn::{GruCell, GruVars, Linear, LinearVars};
use crate::tensor::Tensor;
use crate::trajectory::Transition;

/// Width of the raw transition feature vector `(s, a, r, s')`.
pub const TRANSITION_DIM: usize = 7;

pub fn transition_features(t: &Transition) -> Tensor {
    Tensor::row(&[
        t.state[0],
        t.state[1],
        t.action[0],
        t.action[1],
        t.reward,
        t.next_state[0],
        t.next_state[1],
    ])
}

/// Belief state after encoding a history prefix: hidden states plus the
/// cluster posterior and per-cluster latent posteriors they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub h_alpha: Tensor,
    pub h_beta: Tensor,
    /// Logits of q(c | history), length C.
    pub cluster_logits: Tensor,
    /// C x d_z posterior means of q(z | c, history).
    pub z_mean: Tensor,
    /// C x d_z posterior log-stds.
    pub z_logstd: Tensor,
}

impl PosteriorState {
    pub fn num_clusters(&self) -> usize {
        self.cluster_logits.cols
    }

    pub fn cluster_probs(&self) -> Vec<f64> {
        softmax_tensor(&self.cluster_logits).data
    }

    /// Most probable cluster; ties break to the lowest index.
    pub fn argmax_cluster(&self) -> usize {
        argmax(&self.cluster_logits.data)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSelect {
    /// Sample via Gumbel noise on the logits (training).
    Gumbel,
    /// Deterministic most-probable cluster (meta-test).
    Argmax,
}

#[derive(Debug, Clone)]
pub struct ClusterSample {
    pub index: usize,
    pub one_hot: Vec<f64>,
}

/// Draws a cluster from the posterior. Gumbel mode realizes a sample of
/// softmax(logits) through the max of perturbed logits; argmax mode is the
/// deterministic meta-test rule.
pub fn sample_cluster(
    ps: &PosteriorState,
    mode: ClusterSelect,
    rng: &mut impl Rng,
) -> ClusterSample {
    let logits = &ps.cluster_logits.data;
    let index = match mode {
        ClusterSelect::Argmax => argmax(logits),
        ClusterSelect::Gumbel => {
            let perturbed: Vec<f64> =
                logits.iter().map(|&l| l + crate::rng::gumbel(rng)).collect();
            argmax(&perturbed)
        }
    };
    let mut one_hot = vec![0.0; logits.len()];
    one_hot[index] = 1.0;
    ClusterSample { index, one_hot }
}

/// Reparameterized latent sample for the chosen cluster.
pub fn sample_z(ps: &PosteriorState, cluster: usize, rng: &mut impl Rng) -> Vec<f64> {
    let d = ps.z_mean.cols;
    (0..d)
        .map(|i| {
            let mean = ps.z_mean.get(cluster, i);
            let std = ps.z_logstd.get(cluster, i).exp();
            mean + std * crate::rng::standard_normal(rng)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryEncoder {
    pub num_clusters: usize,
    pub latent_dim: usize,
    pub stacked: bool,
    pub embed: Linear,
    pub cluster_rnn: GruCell,
    pub task_rnn: GruCell,
    pub cluster_head: Linear,
    pub z_mean_head: Linear,
    pub z_logstd_head: Linear,
}

impl TrajectoryEncoder {
    pub fn new(cfg: &InferenceConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.num_clusters;
        let embed = Linear::new(TRANSITION_DIM, cfg.embed_dim, rng);
        let cluster_rnn = GruCell::new(cfg.embed_dim, cfg.cluster_rnn_hidden, rng);
        let task_rnn =
            GruCell::new(cfg.embed_dim + cfg.cluster_rnn_hidden, cfg.task_rnn_hidden, rng);
        let hidden_in = if cfg.stacked { cfg.task_rnn_hidden } else { cfg.cluster_rnn_hidden };
        let mut z_mean_head = Linear::new(hidden_in + c, cfg.latent_dim, rng);
        let mut z_logstd_head = Linear::new(hidden_in + c, cfg.latent_dim, rng);
        // Cluster-conditioning rows start at zero: any constant per-cluster
        // offset would tilt the latent KL toward one cluster for every task
        // before a task-dependent signal exists. Cluster asymmetry emerges
        // from the gradients (seeded by the prior-mean init noise) instead.
        for row in hidden_in..hidden_in + c {
            for col in 0..cfg.latent_dim {
                z_mean_head.w.set(row, col, 0.0);
                z_logstd_head.w.set(row, col, 0.0);
            }
        }
        Self {
            num_clusters: c,
            latent_dim: cfg.latent_dim,
            stacked: cfg.stacked,
            embed,
            cluster_rnn,
            task_rnn,
            cluster_head: Linear::new(cfg.cluster_rnn_hidden, c, rng),
            z_mean_head,
            z_logstd_head,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.embed.tensors();
        out.extend(self.cluster_rnn.tensors());
        out.extend(self.task_rnn.tensors());
        out.extend(self.cluster_head.tensors());
        out.extend(self.z_mean_head.tensors());
        out.extend(self.z_logstd_head.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.embed.tensors_mut();
        out.extend(self.cluster_rnn.tensors_mut());
        out.extend(self.task_rnn.tensors_mut());
        out.extend(self.cluster_head.tensors_mut());
        out.extend(self.z_mean_head.tensors_mut());
        out.extend(self.z_logstd_head.tensors_mut());
        out
    }

    pub fn inject(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        EncoderVars {
            num_clusters: self.num_clusters,
            cluster_hidden: self.cluster_rnn.hidden,
            task_hidden: self.task_rnn.hidden,
            stacked: self.stacked,
            embed: self.embed.inject(g, trainable),
            cluster_rnn: self.cluster_rnn.inject(g, trainable),
            task_rnn: self.task_rnn.inject(g, trainable),
            cluster_head: self.cluster_head.inject(g, trainable),
            z_mean_head: self.z_mean_head.inject(g, trainable),
            z_logstd_head: self.z_logstd_head.inject(g, trainable),
        }
    }

    fn zero_hidden(&self) -> (Tensor, Tensor) {
        (
            Tensor::zeros(1, self.cluster_rnn.hidden),
            Tensor::zeros(1, self.task_rnn.hidden),
        )
    }

    /// Posterior before any interaction: zero hidden states through the
    /// heads. Deterministic, so every trial starts from the same belief.
    pub fn initial_posterior(&self) -> PosteriorState {
        let (ha, hb) = self.zero_hidden();
        self.posterior_from_hidden(ha, hb)
    }

    fn posterior_from_hidden(&self, h_alpha: Tensor, h_beta: Tensor) -> PosteriorState {
        let cluster_logits = self.cluster_head.forward_plain(&h_alpha);
        let zh = if self.stacked { &h_beta } else { &h_alpha };
        let c = self.num_clusters;
        let input = Tensor::from_fn(c, zh.cols + c, |r, col| {
            if col < zh.cols {
                zh.data[col]
            } else if col - zh.cols == r {
                1.0
            } else {
                0.0
            }
        });
        let z_mean = self.z_mean_head.forward_plain(&input);
        let z_logstd = self.z_logstd_head.forward_plain(&input);
        PosteriorState { h_alpha, h_beta, cluster_logits, z_mean, z_logstd }
    }

    /// Advance the belief by one transition. Pure in (self, ps, transition).
    pub fn encode_step(&self, ps: &PosteriorState, transition: &Transition) -> PosteriorState {
        let x = self.embed.forward_plain(&transition_features(transition)).map(f64::tanh);
        let h_alpha = self.cluster_rnn.step_plain(&x, &ps.h_alpha);
        let h_beta = if self.stacked {
            let mut joint = x.data.clone();
            joint.extend_from_slice(&h_alpha.data);
            self.task_rnn.step_plain(&Tensor::row(&joint), &ps.h_beta)
        } else {
            h_alpha.clone()
        };
        self.posterior_from_hidden(h_alpha, h_beta)
    }
}

#[derive(Clone)]
pub struct EncoderVars {
    pub num_clusters: usize,
    pub cluster_hidden: usize,
    pub task_hidden: usize,
    pub stacked: bool,
    pub embed: LinearVars,
    pub cluster_rnn: GruVars,
    pub task_rnn: GruVars,
    pub cluster_head: LinearVars,
    pub z_mean_head: LinearVars,
    pub z_logstd_head: LinearVars,
}

impl EncoderVars {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = self.embed.vars();
        out.extend(self.cluster_rnn.vars());
        out.extend(self.task_rnn.vars());
        out.extend(self.cluster_head.vars());
        out.extend(self.z_mean_head.vars());
        out.extend(self.z_logstd_head.vars());
        out
    }

    pub fn initial_hidden(&self, g: &mut Graph) -> (Var, Var) {
        (
            g.constant(Tensor::zeros(1, self.cluster_hidden)),
            g.constant(Tensor::zeros(1, self.task_hidden)),
        )
    }

    /// One encoding step on the graph; mirrors `TrajectoryEncoder::encode_step`.
    pub fn step(&self, g: &mut Graph, hidden: (Var, Var), features: Var) -> (Var, Var) {
        let pre = self.embed.forward(g, features);
        let x = g.tanh(pre);
        let h_alpha = self.cluster_rnn.step(g, x, hidden.0);
        let h_beta = if self.stacked {
            let joint = g.concat_cols(x, h_alpha);
            self.task_rnn.step(g, joint, hidden.1)
        } else {
            h_alpha
        };
        (h_alpha, h_beta)
    }

    pub fn cluster_logits(&self, g: &mut Graph, h_alpha: Var) -> Var {
        self.cluster_head.forward(g, h_alpha)
    }

    /// Per-cluster posterior parameters `(z_mean, z_logstd)`, each `C x d_z`.
    pub fn z_params(&self, g: &mut Graph, h_alpha: Var, h_beta: Var) -> (Var, Var) {
        let zh = if self.stacked { h_beta } else { h_alpha };
        let c = self.num_clusters;
        let tiled = g.repeat_rows(zh, c);
        let eye = g.constant(Tensor::from_fn(c, c, |r, col| if r == col { 1.0 } else { 0.0 }));
        let input = g.concat_cols(tiled, eye);
        (self.z_mean_head.forward(g, input), self.z_logstd_head.forward(g, input))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn test_encoder(stacked: bool) -> TrajectoryEncoder {
        let cfg = InferenceConfig { stacked, ..InferenceConfig::default() };
        TrajectoryEncoder::new(&cfg, &mut stream(5, "encoder-test", 0))
    }

    fn step() -> Transition {
        Transition {
            state: [0.1, -0.2],
            action: [0.05, 0.0],
            reward: -1.4,
            next_state: [0.15, -0.2],
        }
    }

    #[test]
    fn initial_posterior_is_uniform_and_reproducible() {
        let enc = test_encoder(true);
        let a = enc.initial_posterior();
        let b = enc.initial_posterior();
        assert_eq!(a, b);
        assert_eq!(a.cluster_logits.cols, 4);
        // zero biases make the initial cluster belief exactly uniform
        let probs = a.cluster_probs();
        for p in probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_is_a_pure_function_of_the_history() {
        let enc = test_encoder(true);
        let mut a = enc.initial_posterior();
        let mut b = enc.initial_posterior();
        for _ in 0..5 {
            a = enc.encode_step(&a, &step());
            b = enc.encode_step(&b, &step());
        }
        assert_eq!(a, b);
        assert_ne!(a, enc.initial_posterior());
    }

    #[test]
    fn plain_and_graph_encodings_agree() {
        for stacked in [true, false] {
            let enc = test_encoder(stacked);
            let mut ps = enc.initial_posterior();
            for _ in 0..3 {
                ps = enc.encode_step(&ps, &step());
            }

            let mut g = Graph::forward_only();
            let vars = enc.inject(&mut g, false);
            let mut hidden = vars.initial_hidden(&mut g);
            for _ in 0..3 {
                let f = g.constant(transition_features(&step()));
                hidden = vars.step(&mut g, hidden, f);
            }
            let logits = vars.cluster_logits(&mut g, hidden.0);
            let (zm, zl) = vars.z_params(&mut g, hidden.0, hidden.1);
            for (a, b) in g.value(logits).data.iter().zip(ps.cluster_logits.data.iter()) {
                assert!((a - b).abs() < 1e-12, "stacked={stacked}");
            }
            for (a, b) in g.value(zm).data.iter().zip(ps.z_mean.data.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in g.value(zl).data.iter().zip(ps.z_logstd.data.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_rnn_mode_reuses_cluster_hidden() {
        let enc = test_encoder(false);
        let ps = enc.encode_step(&enc.initial_posterior(), &step());
        assert_eq!(ps.h_alpha, ps.h_beta);
    }

    #[test]
    fn argmax_mode_is_deterministic_with_lowest_index_ties() {
        let mut ps = test_encoder(true).initial_posterior();
        ps.cluster_logits = Tensor::row(&[3.0, 0.0, 0.0, 0.0]);
        let mut rng = stream(0, "cluster", 0);
        assert_eq!(sample_cluster(&ps, ClusterSelect::Argmax, &mut rng).index, 0);
        ps.cluster_logits = Tensor::row(&[1.0, 1.0, 1.0, 1.0]);
        let s = sample_cluster(&ps, ClusterSelect::Argmax, &mut rng);
        assert_eq!(s.index, 0);
        assert_eq!(s.one_hot, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gumbel_mode_samples_near_softmax_frequencies() {
        let mut ps = test_encoder(true).initial_posterior();
        ps.cluster_logits =
            Tensor::row(&[0.7f64.ln(), 0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()]);
        let mut rng = stream(1, "cluster", 0);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| sample_cluster(&ps, ClusterSelect::Gumbel, &mut rng).index == 0)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.02, "freq = {freq}");
    }

    #[test]
    fn z_sample_collapses_to_mean_at_tiny_std() {
        let enc = test_encoder(true);
        let mut ps = enc.initial_posterior();
        ps.z_logstd = Tensor::full(4, 8, -40.0);
        let mut rng = stream(2, "z", 0);
        let z = sample_z(&ps, 1, &mut rng);
        for (i, zi) in z.iter().enumerate() {
            assert!((zi - ps.z_mean.get(1, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn z_sample_variance_matches_unit_std() {
        let enc = test_encoder(true);
        let mut ps = enc.initial_posterior();
        ps.z_mean = Tensor::zeros(4, 8);
        ps.z_logstd = Tensor::zeros(4, 8);
        let mut rng = stream(3, "z", 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = sample_z(&ps, 0, &mut rng)[0];
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.05, "var = {var}");
    }
}
