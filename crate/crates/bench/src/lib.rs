//! Shared fixtures for the benchmark suite.

use metaclust_core::config::RunConfig;
use metaclust_core::inference::{ClusterPrior, Decoders, TrajectoryEncoder};
use metaclust_core::policy::GaussianPolicy;
use metaclust_core::rng;
use metaclust_core::tasks::{MixtureConfig, TaskFamily, TaskSpec};
use metaclust_core::trajectory::Trial;
use metaclust_core::trial::{run_trial, TrialOptions};

pub struct Fixture {
    pub cfg: RunConfig,
    pub task: TaskSpec,
    pub encoder: TrajectoryEncoder,
    pub prior: ClusterPrior,
    pub decoders: Decoders,
    pub explore: GaussianPolicy,
    pub exploit: GaussianPolicy,
    pub trial: Trial,
}

/// Default-size networks on a goal-clustered task with the standard
/// 100-step horizon.
pub fn default_fixture() -> Fixture {
    let cfg = RunConfig::for_mixture(MixtureConfig::new(4, TaskFamily::GoalClustered));
    let task = metaclust_core::tasks::sample_task(&cfg.mixture, 12);
    let mut r = rng::stream(0, "bench", 0);
    let encoder = TrajectoryEncoder::new(&cfg.inference, &mut r);
    let prior = ClusterPrior::new(cfg.inference.num_clusters, cfg.inference.latent_dim, cfg.inference.prior_init_std, &mut r);
    let decoders = Decoders::new(
        cfg.inference.latent_dim,
        cfg.inference.decoder_hidden,
        cfg.inference.lambda_state,
        &mut r,
    );
    let explore = GaussianPolicy::new(cfg.policy_input_dim(), &cfg.policy, &mut r);
    let exploit = GaussianPolicy::new(cfg.policy_input_dim(), &cfg.policy, &mut r);
    let result = run_trial(
        &task,
        &cfg.env,
        &encoder,
        &explore,
        &exploit,
        &TrialOptions::default(),
        99,
    )
    .expect("rollout succeeds");
    Fixture { cfg, task, encoder, prior, decoders, explore, exploit, trial: result.trial }
}
