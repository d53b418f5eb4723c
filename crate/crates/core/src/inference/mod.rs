//! Cluster-based variational task inference.
//!
//! A stacked recurrent encoder turns ongoing trajectories into a joint
//! posterior over a discrete cluster and a cluster-conditioned continuous
//! task latent; learnable per-cluster Gaussian priors and trajectory
//! decoders close the variational objective.

pub mod decoders;
pub mod encoder;
pub mod loss;
pub mod prior;

pub use decoders::{reconstruction_loss, Decoders, TrialTargets};
pub use encoder::{
    sample_cluster, sample_z, ClusterSample, ClusterSelect, PosteriorState, TrajectoryEncoder,
};
pub use loss::{
    ReconCluster,
    build_trial_loss, consistency_in_trial_loss, elbo_at, inference_objective, inference_update,
    ElboOptions, ElboTerms, InferenceDiag, InferenceError, LossOptions, Relaxation,
};
pub use prior::{gauss_kl_plain, prior_consistency_loss, ClusterPrior};

use serde::{Deserialize, Serialize};

/// Tunables of the inference stack. `num_clusters` is the number of
/// clusters the agent models, which may differ from the number of clusters
/// actually present in the task distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_num_clusters")]
    pub num_clusters: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_rnn_hidden")]
    pub cluster_rnn_hidden: usize,
    #[serde(default = "default_rnn_hidden")]
    pub task_rnn_hidden: usize,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: usize,
    /// Two-level encoder; `false` collapses to a single shared RNN.
    #[serde(default = "default_true")]
    pub stacked: bool,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_lambda_i")]
    pub lambda_i: f64,
    #[serde(default = "default_lambda_p")]
    pub lambda_p: f64,
    /// Weight of the state-reconstruction term (0 for reward-clustered
    /// environments, 1 for dynamics-clustered ones).
    #[serde(default)]
    pub lambda_state: f64,
    #[serde(default = "default_elbo_stride")]
    pub elbo_stride: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_buffer_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_target_sync")]
    pub target_sync_interval: u64,
    #[serde(default = "default_temperature")]
    pub gumbel_temperature: f64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Spread of the initial per-cluster prior means.
    #[serde(default = "default_prior_init_std")]
    pub prior_init_std: f64,
    /// Scale the training objective's reconstruction term by the inverse
    /// trial length. Off by default: the summed form keeps the latent
    /// informative; normalizing lets the KL terms crush it.
    #[serde(default)]
    pub normalize_reconstruction: bool,
    /// Inference optimizer steps per training iteration, each on a fresh
    /// buffer batch.
    #[serde(default = "default_updates_per_iteration")]
    pub updates_per_iteration: usize,
    /// How the reconstruction term conditions on the cluster.
    #[serde(default = "default_recon_cluster")]
    pub recon_cluster: ReconCluster,
    /// Re-seed clusters whose batch usage drops below this fraction of the
    /// uniform share (0 disables the guard).
    #[serde(default = "default_revival_threshold")]
    pub revival_threshold: f64,
    /// Check for empty clusters every this many inference epochs.
    #[serde(default = "default_revival_interval")]
    pub revival_interval: u64,
    /// Inference epoch at which all priors are seeded onto spread latent
    /// codes of live tasks (0 disables the one-shot seeding).
    #[serde(default = "default_prior_reseed_epoch")]
    pub prior_reseed_epoch: u64,
}

fn default_num_clusters() -> usize {
    4
}
fn default_latent_dim() -> usize {
    8
}
fn default_embed_dim() -> usize {
    32
}
fn default_rnn_hidden() -> usize {
    64
}
fn default_decoder_hidden() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_lambda_i() -> f64 {
    1.0
}
fn default_lambda_p() -> f64 {
    0.1
}
fn default_elbo_stride() -> usize {
    4
}
fn default_batch_size() -> usize {
    16
}
fn default_buffer_capacity() -> usize {
    2000
}
fn default_target_sync() -> u64 {
    50
}
fn default_temperature() -> f64 {
    1.0
}
fn default_mc_samples() -> usize {
    1
}
fn default_prior_init_std() -> f64 {
    0.1
}
fn default_updates_per_iteration() -> usize {
    1
}
fn default_recon_cluster() -> ReconCluster {
    ReconCluster::Sampled
}
fn default_revival_threshold() -> f64 {
    0.25
}
fn default_revival_interval() -> u64 {
    10
}
fn default_prior_reseed_epoch() -> u64 {
    50
}

impl Default for InferenceConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl InferenceConfig {
    pub fn loss_options(&self, relaxation: Relaxation) -> LossOptions {
        LossOptions {
            elbo: ElboOptions {
                temperature: self.gumbel_temperature,
                mc_samples: self.mc_samples,
                relaxation,
                recon_cluster: self.recon_cluster,
            },
            lambda_i: self.lambda_i,
            lambda_p: self.lambda_p,
            elbo_stride: self.elbo_stride,
            grad_clip: self.grad_clip,
            normalize_reconstruction: self.normalize_reconstruction,
        }
    }
}
