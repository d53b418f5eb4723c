//! The full inference training objective.
//!
//! Per timestep the ELBO combines the trial reconstruction likelihood under
//! a Gumbel-sampled cluster and reparameterized latent, the posterior-to-
//! prior latent KL averaged exactly over the cluster posterior, and the
//! cluster KL to the fixed uniform prior (computed via its entropy
//! decomposition). Two regularizers are subtracted: in-trial consistency of
//! consecutive cluster posteriors and prior consistency against the target
//! copy. The objective is maximized; training minimizes its negation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::inference::decoders::{reconstruction_sq, Decoders, TrialTargets};
use crate::inference::encoder::{argmax, transition_features, PosteriorState, TrajectoryEncoder};
use crate::inference::prior::{gauss_kl_rows, prior_consistency_var, ClusterPrior, PriorVars};
use crate::nn::{clip_grad_norm, Adam};
use crate::rng;
use crate::tensor::Tensor;
use crate::trajectory::Trial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relaxation {
    /// Soft relaxed sample; the loss is smooth in the logits (used by the
    /// finite-difference checks).
    Soft,
    /// Hard one-hot forward with the soft gradient (used in training).
    StraightThrough,
}

/// How the reconstruction term conditions on the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconCluster {
    /// Latent from the Gumbel-sampled cluster; gradients reach the cluster
    /// head through the relaxation (soft or straight-through).
    Sampled,
    /// Same sample held constant: the cluster posterior learns only from
    /// the KL and consistency terms, mixture-model style. Removes the
    /// high-variance reconstruction gradient that can saturate the head.
    SampledDetached,
    /// Exact expectation over clusters with detached weights; C decode
    /// passes per evaluated step, Monte Carlo only over the Gaussian noise.
    ExpectationDetached,
}

#[derive(Debug, Clone, Copy)]
pub struct ElboOptions {
    pub temperature: f64,
    pub mc_samples: usize,
    pub relaxation: Relaxation,
    pub recon_cluster: ReconCluster,
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            mc_samples: 1,
            relaxation: Relaxation::StraightThrough,
            recon_cluster: ReconCluster::Sampled,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub elbo: ElboOptions,
    pub lambda_i: f64,
    pub lambda_p: f64,
    /// Evaluate the ELBO at every `elbo_stride`-th timestep (random offset);
    /// the sum is rescaled so it estimates the full-trial sum.
    pub elbo_stride: usize,
    pub grad_clip: Option<f64>,
    /// Divide the reconstruction term by the trial length in the training
    /// objective, keeping its gradient commensurate with the KL terms so
    /// the cluster head does not saturate before the priors differentiate.
    pub normalize_reconstruction: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            elbo: ElboOptions::default(),
            lambda_i: 1.0,
            lambda_p: 0.1,
            elbo_stride: 4,
            grad_clip: None,
            normalize_reconstruction: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("non-finite inference loss")]
    NonFinite,
}

/// Entropy of the categorical distribution given by `logits` (a 1 x C node).
pub fn categorical_entropy_var(g: &mut Graph, logits: Var) -> Var {
    let p = g.softmax_rows(logits);
    let lp = g.log_softmax_rows(logits);
    let plp = g.mul(p, lp);
    let s = g.sum(plp);
    g.neg(s)
}

/// KL(q(c) || uniform) = ln C - H(q), the entropy decomposition.
pub fn kl_to_uniform_var(g: &mut Graph, logits: Var, num_clusters: usize) -> Var {
    let h = categorical_entropy_var(g, logits);
    let neg_h = g.neg(h);
    g.add_scalar(neg_h, (num_clusters as f64).ln())
}

/// KL(q_t || q_{t+1}) from logits.
pub fn categorical_kl_var(g: &mut Graph, logits_a: Var, logits_b: Var) -> Var {
    let p = g.softmax_rows(logits_a);
    let lpa = g.log_softmax_rows(logits_a);
    let lpb = g.log_softmax_rows(logits_b);
    let diff = g.sub(lpa, lpb);
    let prod = g.mul(p, diff);
    g.sum(prod)
}

/// Gumbel-softmax cluster sample from logits with fixed noise.
pub fn gumbel_cluster_var(
    g: &mut Graph,
    logits: Var,
    noise: &Tensor,
    temperature: f64,
    relaxation: Relaxation,
) -> Var {
    let nv = g.constant(noise.clone());
    let perturbed = g.add(logits, nv);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let soft = g.softmax_rows(scaled);
    match relaxation {
        Relaxation::Soft => soft,
        Relaxation::StraightThrough => {
            let hard_idx = argmax(&g.value(soft).data);
            let hard = g.constant(Tensor::one_hot(g.value(soft).cols, hard_idx));
            let soft_detached = g.detach(soft);
            let delta = g.sub(hard, soft_detached);
            g.add(delta, soft)
        }
    }
}

/// Reparameterized latent under cluster sample `c_tilde`:
/// `z = c~ Zmean + exp(c~ Zlogstd) .* eps`.
pub fn reparam_z_var(
    g: &mut Graph,
    c_tilde: Var,
    z_mean: Var,
    z_logstd: Var,
    eps: &Tensor,
) -> Var {
    let mean = g.matmul(c_tilde, z_mean);
    let logstd = g.matmul(c_tilde, z_logstd);
    let std = g.exp(logstd);
    let ev = g.constant(eps.clone());
    let noise = g.mul(std, ev);
    g.add(mean, noise)
}

/// The ELBO pieces at one timestep, as graph nodes.
pub(crate) struct ElboVars {
    pub recon_loglik: Var,
    pub latent_kl: Var,
    pub cluster_kl: Var,
    pub elbo: Var,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn elbo_term_var(
    g: &mut Graph,
    logits: Var,
    z_mean: Var,
    z_logstd: Var,
    prior: PriorVars,
    dec: &crate::inference::decoders::DecoderVars,
    targets: &crate::inference::decoders::TrialTargetVars,
    opts: &ElboOptions,
    noise: &[(Tensor, Tensor)],
) -> ElboVars {
    assert_eq!(noise.len(), opts.mc_samples);
    // Reconstruction log-likelihood (up to constants), conditioned on the
    // cluster per `opts.recon_cluster`.
    let mut recon_sum: Option<Var> = None;
    let acc = |g: &mut Graph, sum: Option<Var>, v: Var| match sum {
        None => Some(v),
        Some(s) => Some(g.add(s, v)),
    };
    match opts.recon_cluster {
        ReconCluster::Sampled => {
            for (gumbel_noise, eps) in noise {
                let c_tilde =
                    gumbel_cluster_var(g, logits, gumbel_noise, opts.temperature, opts.relaxation);
                let z = reparam_z_var(g, c_tilde, z_mean, z_logstd, eps);
                let sq = reconstruction_sq(g, dec, targets, z);
                let ll = g.neg(sq);
                recon_sum = acc(g, recon_sum, ll);
            }
        }
        ReconCluster::SampledDetached => {
            for (gumbel_noise, eps) in noise {
                let perturbed = g.value(logits).add(gumbel_noise);
                let hard = argmax(&perturbed.data);
                let num_clusters = perturbed.cols;
                let one_hot = g.constant(Tensor::one_hot(num_clusters, hard));
                let z = reparam_z_var(g, one_hot, z_mean, z_logstd, eps);
                let sq = reconstruction_sq(g, dec, targets, z);
                let ll = g.neg(sq);
                recon_sum = acc(g, recon_sum, ll);
            }
        }
        ReconCluster::ExpectationDetached => {
            let num_clusters = g.value(logits).cols;
            let probs = g.softmax_rows(logits);
            let weights = g.detach(probs);
            for (_, eps) in noise {
                for c in 0..num_clusters {
                    let one_hot = g.constant(Tensor::one_hot(num_clusters, c));
                    let z = reparam_z_var(g, one_hot, z_mean, z_logstd, eps);
                    let sq = reconstruction_sq(g, dec, targets, z);
                    let ll = g.neg(sq);
                    let weight = g.slice_cols(weights, c, c + 1);
                    let weighted = g.mul(weight, ll);
                    recon_sum = acc(g, recon_sum, weighted);
                }
            }
        }
    }
    let recon_loglik = g.scale(recon_sum.expect("mc_samples >= 1"), 1.0 / opts.mc_samples as f64);

    // E_{q(c)} KL(q(z|c) || p(z|c)), exact over clusters
    let kl_rows = gauss_kl_rows(g, z_mean, z_logstd, prior.mean, prior.logstd);
    let probs = g.softmax_rows(logits);
    let latent_kl_mat = g.matmul(probs, kl_rows);
    let latent_kl = g.sum(latent_kl_mat);

    let num_clusters = g.value(logits).cols;
    let cluster_kl = kl_to_uniform_var(g, logits, num_clusters);

    let minus_lkl = g.sub(recon_loglik, latent_kl);
    let elbo = g.sub(minus_lkl, cluster_kl);
    ElboVars { recon_loglik, latent_kl, cluster_kl, elbo }
}

/// Values of the ELBO pieces at one timestep.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub recon_loglik: f64,
    pub latent_kl: f64,
    pub cluster_kl: f64,
    pub elbo: f64,
}

/// ELBO at the belief `ps` (which encodes some history prefix), decoding the
/// whole trial. Stochastic through the cluster/latent samples drawn from
/// `rng`.
pub fn elbo_at(
    ps: &PosteriorState,
    prior: &ClusterPrior,
    dec: &Decoders,
    trial: &Trial,
    opts: &ElboOptions,
    rng: &mut impl Rng,
) -> ElboTerms {
    let c = ps.num_clusters();
    let d = ps.z_mean.cols;
    let noise = draw_noise(rng, opts.mc_samples, c, d);

    let mut g = Graph::forward_only();
    let logits = g.constant(ps.cluster_logits.clone());
    let z_mean = g.constant(ps.z_mean.clone());
    let z_logstd = g.constant(ps.z_logstd.clone());
    let prior_vars = prior.inject(&mut g, false);
    let dec_vars = dec.inject(&mut g, false);
    let targets = TrialTargets::from_trial(trial).inject(&mut g);
    let terms =
        elbo_term_var(&mut g, logits, z_mean, z_logstd, prior_vars, &dec_vars, &targets, opts, &noise);
    ElboTerms {
        recon_loglik: g.value(terms.recon_loglik).data[0],
        latent_kl: g.value(terms.latent_kl).data[0],
        cluster_kl: g.value(terms.cluster_kl).data[0],
        elbo: g.value(terms.elbo).data[0],
    }
}

fn draw_noise(
    rng: &mut impl Rng,
    mc_samples: usize,
    num_clusters: usize,
    latent_dim: usize,
) -> Vec<(Tensor, Tensor)> {
    (0..mc_samples)
        .map(|_| {
            let gumbel = Tensor::from_fn(1, num_clusters, |_, _| rng::gumbel(rng));
            let eps = Tensor::from_fn(1, latent_dim, |_, _| rng::standard_normal(rng));
            (gumbel, eps)
        })
        .collect()
}

/// Mean KL between consecutive cluster posteriors of a trial.
pub fn consistency_in_trial_loss(posteriors: &[Vec<f64>]) -> f64 {
    assert!(posteriors.len() >= 2, "need at least two posteriors");
    let pairs = posteriors.len() - 1;
    posteriors
        .windows(2)
        .map(|w| crate::intrinsic::categorical_kl(&w[0], &w[1]))
        .sum::<f64>()
        / pairs as f64
}

/// One trial's loss graph with every term exposed for inspection and
/// term-wise gradient checks.
pub struct TrialLoss {
    pub graph: Graph,
    pub terms: TrialTerms,
    pub enc_vars: Vec<Var>,
    pub dec_vars: Vec<Var>,
    pub prior_vars: Vec<Var>,
    /// Cluster posterior after the whole trial (plain values).
    pub final_cluster_probs: Vec<f64>,
    /// Per-cluster posterior latent means (C x d_z) at the end of the
    /// trial; row c is where this task would live under cluster c.
    pub final_z_mean: Tensor,
}

#[derive(Clone, Copy)]
pub struct TrialTerms {
    /// Rescaled sum over sampled timesteps of the reconstruction term.
    pub recon_loglik: Var,
    /// Rescaled sum of the latent KL term.
    pub latent_kl: Var,
    /// Rescaled sum of the cluster KL term.
    pub cluster_kl: Var,
    /// In-trial consistency regularizer.
    pub in_trial: Var,
    /// Prior consistency regularizer.
    pub prior_reg: Var,
    /// Full per-trial objective (maximized).
    pub objective: Var,
    /// Negated objective (minimized).
    pub loss: Var,
}

/// Builds the loss graph for one trial. All stochastic choices (timestep
/// offset, Gumbel noise, reparameterization noise) come from `seed`, so the
/// value is a deterministic function of (parameters, trial, seed).
pub fn build_trial_loss(
    enc: &TrajectoryEncoder,
    prior: &ClusterPrior,
    dec: &Decoders,
    trial: &Trial,
    opts: &LossOptions,
    seed: u64,
) -> TrialLoss {
    let mut noise_rng = rng::stream(seed, "elbo-noise", 0);
    let stride = opts.elbo_stride.max(1);
    let offset = noise_rng.random_range(0..stride);
    let total = trial.total_len();

    let mut g = Graph::new();
    let enc_vars = enc.inject(&mut g, true);
    let prior_vars = prior.inject(&mut g, true);
    let target_vars = prior.inject_target(&mut g);
    let dec_vars = dec.inject(&mut g, true);
    let targets = TrialTargets::from_trial(trial).inject(&mut g);

    // Encode the whole trial, keeping per-step cluster logits and hiddens.
    let mut hidden = enc_vars.initial_hidden(&mut g);
    let mut logits_seq = Vec::with_capacity(total + 1);
    let mut hidden_seq = Vec::with_capacity(total + 1);
    logits_seq.push(enc_vars.cluster_logits(&mut g, hidden.0));
    hidden_seq.push(hidden);
    for t in trial.steps() {
        let f = g.constant(transition_features(t));
        hidden = enc_vars.step(&mut g, hidden, f);
        logits_seq.push(enc_vars.cluster_logits(&mut g, hidden.0));
        hidden_seq.push(hidden);
    }

    // ELBO at the sampled timesteps.
    let t_set: Vec<usize> = (offset..=total).step_by(stride).collect();
    let mut recon_sum: Option<Var> = None;
    let mut lkl_sum: Option<Var> = None;
    let mut ckl_sum: Option<Var> = None;
    for &t in &t_set {
        let (z_mean, z_logstd) = enc_vars.z_params(&mut g, hidden_seq[t].0, hidden_seq[t].1);
        let noise = draw_noise(&mut noise_rng, opts.elbo.mc_samples, enc.num_clusters, enc.latent_dim);
        let e = elbo_term_var(
            &mut g,
            logits_seq[t],
            z_mean,
            z_logstd,
            prior_vars,
            &dec_vars,
            &targets,
            &opts.elbo,
            &noise,
        );
        let acc = |g: &mut Graph, sum: Option<Var>, v: Var| match sum {
            None => Some(v),
            Some(s) => Some(g.add(s, v)),
        };
        recon_sum = acc(&mut g, recon_sum, e.recon_loglik);
        lkl_sum = acc(&mut g, lkl_sum, e.latent_kl);
        ckl_sum = acc(&mut g, ckl_sum, e.cluster_kl);
    }
    let scale = stride as f64;
    let recon_scale =
        if opts.normalize_reconstruction { scale / total as f64 } else { scale };
    let recon_loglik = g.scale(recon_sum.expect("nonempty t set"), recon_scale);
    let latent_kl = g.scale(lkl_sum.expect("nonempty t set"), scale);
    let cluster_kl = g.scale(ckl_sum.expect("nonempty t set"), scale);

    // In-trial consistency over consecutive posteriors.
    let mut kl_sum: Option<Var> = None;
    for w in logits_seq.windows(2) {
        let kl = categorical_kl_var(&mut g, w[0], w[1]);
        kl_sum = Some(match kl_sum {
            None => kl,
            Some(s) => g.add(s, kl),
        });
    }
    let in_trial = g.scale(kl_sum.expect("at least one step"), 1.0 / (logits_seq.len() - 1) as f64);

    let prior_reg = prior_consistency_var(&mut g, prior_vars, target_vars);

    let final_logits = *logits_seq.last().expect("nonempty");
    let final_cluster_probs = crate::graph::softmax_tensor(g.value(final_logits)).data;
    let final_z_mean = {
        let last = *hidden_seq.last().expect("nonempty");
        let (zm, _) = enc_vars.z_params(&mut g, last.0, last.1);
        g.value(zm).clone()
    };

    // objective = sum_t ELBO_t - lambda_i L_I - lambda_p L_P
    let kls = g.add(latent_kl, cluster_kl);
    let elbo_total = g.sub(recon_loglik, kls);
    let li = g.scale(in_trial, opts.lambda_i);
    let lp = g.scale(prior_reg, opts.lambda_p);
    let reg = g.add(li, lp);
    let objective = g.sub(elbo_total, reg);
    let loss = g.neg(objective);

    TrialLoss {
        terms: TrialTerms {
            recon_loglik,
            latent_kl,
            cluster_kl,
            in_trial,
            prior_reg,
            objective,
            loss,
        },
        enc_vars: enc_vars.all_vars(),
        dec_vars: dec_vars.all_vars(),
        prior_vars: prior_vars.all_vars(),
        final_cluster_probs,
        final_z_mean,
        graph: g,
    }
}

/// Value of the training objective on a batch of trials (mean over trials).
pub fn inference_objective(
    enc: &TrajectoryEncoder,
    prior: &ClusterPrior,
    dec: &Decoders,
    trials: &[Trial],
    opts: &LossOptions,
    seed: u64,
) -> f64 {
    assert!(!trials.is_empty(), "empty batch");
    trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let tl = build_trial_loss(enc, prior, dec, t, opts, rng::stream(seed, "trial-noise", i as u64).random());
            tl.graph.value(tl.terms.objective).data[0]
        })
        .sum::<f64>()
        / trials.len() as f64
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InferenceDiag {
    pub objective: f64,
    pub recon_loglik: f64,
    pub latent_kl: f64,
    pub cluster_kl: f64,
    pub in_trial: f64,
    pub prior_reg: f64,
    pub grad_norm: f64,
    /// Batch-mean end-of-trial cluster posterior: how much each cluster is
    /// actually used.
    pub cluster_usage: Vec<f64>,
    /// End-of-trial latent codes, one per batch trial (donors for
    /// empty-cluster revival).
    pub codes: Vec<Tensor>,
}

/// One optimizer step on a batch of trials. Gradients are computed per
/// trial in parallel and averaged in batch order, so results do not depend
/// on scheduling.
pub fn inference_update(
    enc: &mut TrajectoryEncoder,
    prior: &mut ClusterPrior,
    dec: &mut Decoders,
    opt: &mut Adam,
    trials: &[Trial],
    opts: &LossOptions,
    seed: u64,
) -> Result<InferenceDiag, InferenceError> {
    assert!(!trials.is_empty(), "empty batch");
    let results: Vec<(InferenceDiag, Vec<Tensor>)> = trials
        .par_iter()
        .enumerate()
        .map(|(i, trial)| {
            let trial_seed: u64 = {
                use rand::Rng as _;
                rng::stream(seed, "trial-noise", i as u64).random()
            };
            let mut tl = build_trial_loss(enc, prior, dec, trial, opts, trial_seed);
            let grads = tl.graph.backward(tl.terms.loss);
            let diag = InferenceDiag {
                objective: tl.graph.value(tl.terms.objective).data[0],
                recon_loglik: tl.graph.value(tl.terms.recon_loglik).data[0],
                latent_kl: tl.graph.value(tl.terms.latent_kl).data[0],
                cluster_kl: tl.graph.value(tl.terms.cluster_kl).data[0],
                in_trial: tl.graph.value(tl.terms.in_trial).data[0],
                prior_reg: tl.graph.value(tl.terms.prior_reg).data[0],
                grad_norm: 0.0,
                cluster_usage: tl.final_cluster_probs.clone(),
                codes: vec![tl.final_z_mean.clone()],
            };
            let all: Vec<Tensor> = tl
                .enc_vars
                .iter()
                .chain(tl.dec_vars.iter())
                .chain(tl.prior_vars.iter())
                .map(|&v| grads.get(v))
                .collect();
            (diag, all)
        })
        .collect();

    let n = trials.len() as f64;
    let mut mean_grads = results[0].1.clone();
    for (_, g) in results.iter().skip(1) {
        for (acc, gi) in mean_grads.iter_mut().zip(g.iter()) {
            acc.add_assign(gi);
        }
    }
    for g in mean_grads.iter_mut() {
        for x in g.data.iter_mut() {
            *x /= n;
        }
    }

    let mut diag = InferenceDiag {
        cluster_usage: vec![0.0; enc.num_clusters],
        ..InferenceDiag::default()
    };
    for (d, _) in &results {
        diag.objective += d.objective / n;
        diag.recon_loglik += d.recon_loglik / n;
        diag.latent_kl += d.latent_kl / n;
        diag.cluster_kl += d.cluster_kl / n;
        diag.in_trial += d.in_trial / n;
        diag.prior_reg += d.prior_reg / n;
        for (u, p) in diag.cluster_usage.iter_mut().zip(d.cluster_usage.iter()) {
            *u += p / n;
        }
        diag.codes.extend(d.codes.iter().cloned());
    }

    if !diag.objective.is_finite() || mean_grads.iter().any(Tensor::has_nan) {
        return Err(InferenceError::NonFinite);
    }

    diag.grad_norm = match opts.grad_clip {
        Some(max) => clip_grad_norm(&mut mean_grads, max),
        None => mean_grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt(),
    };

    let mut params = enc.tensors_mut();
    params.extend(dec.tensors_mut());
    params.extend(prior.tensors_mut());
    opt.step(&mut params, &mean_grads);
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::InferenceConfig;
    use crate::rng::stream;
    use crate::trajectory::{Trajectory, Transition};

    fn tiny_setup(
        c: usize,
        d: usize,
    ) -> (TrajectoryEncoder, ClusterPrior, Decoders, Trial, InferenceConfig) {
        let cfg = InferenceConfig {
            num_clusters: c,
            latent_dim: d,
            embed_dim: 6,
            cluster_rnn_hidden: 5,
            task_rnn_hidden: 5,
            decoder_hidden: 6,
            ..InferenceConfig::default()
        };
        let mut r = stream(11, "loss-test", 0);
        let enc = TrajectoryEncoder::new(&cfg, &mut r);
        let prior = ClusterPrior::new(c, d, 0.1, &mut r);
        let dec = Decoders::new(d, cfg.decoder_hidden, 0.5, &mut r);
        let mk = |i: f64| Transition {
            state: [0.02 * i, -0.03 * i],
            action: [0.05, -0.01],
            reward: -1.0 + 0.05 * i,
            next_state: [0.02 * (i + 1.0), -0.03 * (i + 1.0)],
        };
        let trial = Trial {
            task_id: 0,
            cluster_id: 1,
            episodes: vec![
                Trajectory { transitions: (0..4).map(|i| mk(i as f64)).collect() },
                Trajectory { transitions: (4..8).map(|i| mk(i as f64)).collect() },
            ],
        };
        (enc, prior, dec, trial, cfg)
    }

    #[test]
    fn latent_kl_vanishes_when_posterior_equals_prior() {
        let (enc, mut prior, dec, trial, _) = tiny_setup(2, 2);
        let mut ps = enc.initial_posterior();
        prior.mean = ps.z_mean.clone();
        prior.logstd = ps.z_logstd.clone();
        ps.cluster_logits = Tensor::row(&[0.3, -0.2]);
        let mut r = stream(0, "t", 0);
        let terms = elbo_at(&ps, &prior, &dec, &trial, &ElboOptions::default(), &mut r);
        assert!(terms.latent_kl.abs() < 1e-12);
    }

    #[test]
    fn cluster_kl_vanishes_for_uniform_posterior() {
        let (enc, prior, dec, trial, _) = tiny_setup(4, 2);
        let ps = enc.initial_posterior(); // zero logits -> uniform
        let mut r = stream(0, "t", 0);
        let terms = elbo_at(&ps, &prior, &dec, &trial, &ElboOptions::default(), &mut r);
        assert!(terms.cluster_kl.abs() < 1e-12);
        assert!((terms.elbo - (terms.recon_loglik - terms.latent_kl)).abs() < 1e-12);
    }

    #[test]
    fn unit_gaussian_kl_matches_half_squared_mean_shift() {
        // KL(N(0,1) || N(1,1)) = 0.5 per dimension
        let mut g = Graph::new();
        let mq = g.input(Tensor::row(&[0.0, 0.0]));
        let lq = g.input(Tensor::row(&[0.0, 0.0]));
        let mp = g.input(Tensor::row(&[1.0, 1.0]));
        let lp = g.input(Tensor::row(&[0.0, 0.0]));
        let kl = gauss_kl_rows(&mut g, mq, lq, mp, lp);
        assert!((g.value(kl).data[0] - 1.0).abs() < 1e-12); // 0.5 * 2 dims
    }

    #[test]
    fn consistency_loss_matches_hand_example_and_is_nonnegative() {
        let constant = vec![vec![0.25; 4]; 7];
        assert!(consistency_in_trial_loss(&constant).abs() < 1e-12);

        let two = vec![vec![0.5, 0.5], vec![0.9, 0.1]];
        let got = consistency_in_trial_loss(&two);
        assert!((got - 0.5108).abs() < 1e-4);

        let mut r = stream(5, "ci", 0);
        for _ in 0..50 {
            let seq: Vec<Vec<f64>> = (0..5)
                .map(|_| {
                    let mut q: Vec<f64> = (0..3).map(|_| r.random::<f64>() + 0.01).collect();
                    let s: f64 = q.iter().sum();
                    q.iter_mut().for_each(|x| *x /= s);
                    q
                })
                .collect();
            assert!(consistency_in_trial_loss(&seq) >= 0.0);
        }
    }

    #[test]
    fn graph_consistency_term_matches_plain_function() {
        let (enc, prior, dec, trial, _) = tiny_setup(3, 2);
        let opts = LossOptions { elbo_stride: 1, ..LossOptions::default() };
        let tl = build_trial_loss(&enc, &prior, &dec, &trial, &opts, 7);

        // replay the encoder on plain tensors
        let mut ps = enc.initial_posterior();
        let mut posteriors = vec![ps.cluster_probs()];
        for t in trial.steps() {
            ps = enc.encode_step(&ps, t);
            posteriors.push(ps.cluster_probs());
        }
        let want = consistency_in_trial_loss(&posteriors);
        let got = tl.graph.value(tl.terms.in_trial).data[0];
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn zero_regularizer_weights_reduce_objective_to_elbo_sum() {
        let (enc, mut prior, dec, trial, _) = tiny_setup(2, 2);
        prior.mean.data[0] += 0.3; // make L_P nonzero so the test is meaningful
        let base = LossOptions {
            lambda_i: 0.0,
            lambda_p: 0.0,
            elbo_stride: 1,
            ..LossOptions::default()
        };
        let tl = build_trial_loss(&enc, &prior, &dec, &trial, &base, 3);
        let obj = tl.graph.value(tl.terms.objective).data[0];
        let recon = tl.graph.value(tl.terms.recon_loglik).data[0];
        let lkl = tl.graph.value(tl.terms.latent_kl).data[0];
        let ckl = tl.graph.value(tl.terms.cluster_kl).data[0];
        assert!((obj - (recon - lkl - ckl)).abs() < 1e-9);

        let with_reg = LossOptions { elbo_stride: 1, ..LossOptions::default() };
        let tl2 = build_trial_loss(&enc, &prior, &dec, &trial, &with_reg, 3);
        let obj2 = tl2.graph.value(tl2.terms.objective).data[0];
        assert!(obj2 < obj, "regularizers must lower the objective here");
    }

    #[test]
    fn single_cluster_drops_cluster_terms() {
        let (enc, prior, dec, trial, _) = tiny_setup(1, 2);
        let opts = LossOptions { elbo_stride: 1, ..LossOptions::default() };
        let tl = build_trial_loss(&enc, &prior, &dec, &trial, &opts, 5);
        assert!(tl.graph.value(tl.terms.cluster_kl).data[0].abs() < 1e-12);
        assert!(tl.graph.value(tl.terms.in_trial).data[0].abs() < 1e-12);
    }

    #[test]
    fn update_moves_parameters_and_reports_finite_diag() {
        let (mut enc, mut prior, mut dec, trial, _) = tiny_setup(2, 2);
        let mut opt = Adam::new(1e-3);
        let before = enc.cluster_head.w.clone();
        let opts = LossOptions::default();
        let trials = vec![trial.clone(), trial];
        let diag =
            inference_update(&mut enc, &mut prior, &mut dec, &mut opt, &trials, &opts, 1).unwrap();
        assert!(diag.objective.is_finite());
        assert!(diag.grad_norm > 0.0);
        assert_ne!(before, enc.cluster_head.w);
    }

    #[test]
    fn trial_loss_gradients_spot_check_against_finite_differences() {
        // Full per-term sweep lives in the acceptance suite; this guards the
        // plumbing with a handful of entries per parameter group.
        let (enc, prior, dec, trial, _) = tiny_setup(2, 2);
        let opts = LossOptions {
            elbo: ElboOptions { relaxation: Relaxation::Soft, ..ElboOptions::default() },
            elbo_stride: 1,
            ..LossOptions::default()
        };
        let seed = 17;
        let eval = |enc: &TrajectoryEncoder, prior: &ClusterPrior, dec: &Decoders| {
            let tl = build_trial_loss(enc, prior, dec, &trial, &opts, seed);
            tl.graph.value(tl.terms.loss).data[0]
        };

        let mut tl = build_trial_loss(&enc, &prior, &dec, &trial, &opts, seed);
        let grads = tl.graph.backward(tl.terms.loss);
        let analytic: Vec<Tensor> = tl
            .enc_vars
            .iter()
            .chain(tl.dec_vars.iter())
            .chain(tl.prior_vars.iter())
            .map(|&v| grads.get(v))
            .collect();

        let n_enc = enc.tensors().len();
        let n_dec = dec.tensors().len();
        let perturbed = |ti: usize, i: usize, delta: f64| {
            let (mut e, mut p, mut d) = (enc.clone(), prior.clone(), dec.clone());
            if ti < n_enc {
                e.tensors_mut()[ti].data[i] += delta;
            } else if ti < n_enc + n_dec {
                d.tensors_mut()[ti - n_enc].data[i] += delta;
            } else {
                p.tensors_mut()[ti - n_enc - n_dec].data[i] += delta;
            }
            eval(&e, &p, &d)
        };

        let eps = 1e-5;
        let mut checked = 0;
        for (ti, base) in analytic.iter().enumerate() {
            for i in (0..base.len()).step_by(base.len().max(7) / 3) {
                let fd = (perturbed(ti, i, eps) - perturbed(ti, i, -eps)) / (2.0 * eps);
                let a = base.data[i];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < 1e-5,
                    "param {ti} entry {i}: analytic {a} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 30);
    }

    #[test]
    fn update_is_deterministic_for_fixed_seed() {
        let (enc0, prior0, dec0, trial, _) = tiny_setup(3, 2);
        let run = || {
            let (mut enc, mut prior, mut dec) = (enc0.clone(), prior0.clone(), dec0.clone());
            let mut opt = Adam::new(1e-3);
            let opts = LossOptions::default();
            let trials = vec![trial.clone(); 3];
            inference_update(&mut enc, &mut prior, &mut dec, &mut opt, &trials, &opts, 9).unwrap();
            enc.cluster_head.w
        };
        assert_eq!(run(), run());
    }
}
