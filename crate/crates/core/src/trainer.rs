//! The meta-training loop.
//!
//! Each iteration collects trials from sampled train tasks in parallel,
//! inserts them into the trajectory buffer, updates the exploration policy
//! on shaped rewards and the exploitation policy on environment rewards,
//! then takes one inference step on a buffer batch and syncs the prior
//! target on its schedule. Held-out evaluation and checkpointing run on
//! fixed cadences. Every random stream derives from the config seed, so a
//! config reproduces its run exactly.

use std::path::PathBuf;

use rand::Rng as _;
use rayon::prelude::*;
use thiserror::Error;

use crate::buffer::{BufferError, TrialBuffer, TrialRecord};
use crate::checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
use crate::config::{ConfigError, RunConfig};
use crate::env::EnvError;
use crate::eval::{evaluate, EvalReport};
use crate::inference::{
    inference_update, ClusterPrior, Decoders, InferenceDiag, InferenceError, Relaxation,
    TrajectoryEncoder,
};
use crate::metrics::{HeaderRecord, MetricRecord, MetricWriter, MetricsError, METRICS_SCHEMA_VERSION};
use crate::nn::Adam;
use crate::policy::GaussianPolicy;
use crate::ppo::{ppo_update, PpoDiag, PpoError, RolloutBatch, Sample};
use crate::rng;
use crate::trial::{run_trial, RolloutMode, TrialOptions, TrialResult};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("rayon pool: {0}")]
    Pool(String),
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint: Checkpoint,
    pub final_eval: EvalReport,
}

/// Derives a fresh u64 seed for (tag, index) under the master seed.
fn seed_for(master: u64, tag: &str, index: u64) -> u64 {
    rng::stream(master, tag, index).random()
}

/// The meta-train / meta-test split a config denotes. Evaluating a
/// checkpoint against its config reconstructs exactly the split the run
/// trained with.
pub fn meta_split_for(cfg: &RunConfig) -> (Vec<crate::tasks::TaskSpec>, Vec<crate::tasks::TaskSpec>) {
    crate::tasks::make_meta_split(
        &cfg.mixture,
        cfg.trainer.n_train_tasks,
        cfg.trainer.n_test_tasks,
        seed_for(cfg.seed, "split", 0),
    )
}

pub fn meta_train(cfg: &RunConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint();
    let run_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&run_dir)?;
    cfg.save(&run_dir.join("config.toml"))?;

    let variant = cfg.trainer.variant;
    let inference_cfg = cfg.resolved_inference();
    let horizon = cfg.env.horizon;
    let episodes = cfg.trainer.n_exploitation_episodes + 1;
    let trial_len = episodes * horizon;

    let (train_tasks, test_tasks) = meta_split_for(cfg);

    let mut init_rng = rng::stream(cfg.seed, "init", 0);
    let mut encoder = TrajectoryEncoder::new(&inference_cfg, &mut init_rng);
    let mut prior = ClusterPrior::new(
        inference_cfg.num_clusters,
        inference_cfg.latent_dim,
        inference_cfg.prior_init_std,
        &mut init_rng,
    );
    let mut decoders = Decoders::new(
        inference_cfg.latent_dim,
        inference_cfg.decoder_hidden,
        inference_cfg.lambda_state,
        &mut init_rng,
    );
    let input_dim = cfg.policy_input_dim();
    let mut explore = GaussianPolicy::new(input_dim, &cfg.policy, &mut init_rng);
    let mut exploit = GaussianPolicy::new(input_dim, &cfg.policy, &mut init_rng);

    let mut inference_opt = Adam::new(inference_cfg.learning_rate);
    let mut explore_opt = Adam::new(cfg.ppo.learning_rate);
    let mut exploit_opt = Adam::new(cfg.ppo.learning_rate);

    let mut buffer = TrialBuffer::new(inference_cfg.buffer_capacity, trial_len);
    let loss_opts = inference_cfg.loss_options(Relaxation::StraightThrough);

    let trial_opts = TrialOptions {
        n_exploitation: cfg.trainer.n_exploitation_episodes,
        mode: RolloutMode::Train,
        use_exploration_policy: variant.use_exploration(),
        schedule: cfg.intrinsic,
        consistency_reward_off: variant.consistency_reward_off(),
    };

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = MetricWriter::create(
        &metrics_path,
        &HeaderRecord {
            fingerprint: fingerprint.clone(),
            schema_version: METRICS_SCHEMA_VERSION,
            variant: variant.label().to_string(),
            lambda_i: loss_opts.lambda_i,
            lambda_p: loss_opts.lambda_p,
        },
    )?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.trainer.workers)
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;

    let mut inference_epoch: u64 = 0;
    prior.sync_target(inference_epoch, inference_cfg.target_sync_interval);
    let mut frames: u64 = 0;
    let mut last_eval: Option<EvalReport> = None;

    for iter in 0..cfg.trainer.iterations {
        // --- collect trials in parallel, one stream per trial
        let mut task_rng = rng::stream(cfg.seed, "task-choice", iter);
        let picks: Vec<(usize, u64)> = (0..cfg.trainer.trials_per_iteration)
            .map(|k| {
                let idx = task_rng.random_range(0..train_tasks.len());
                let trial_seed = seed_for(
                    cfg.seed,
                    "trial",
                    iter * cfg.trainer.trials_per_iteration as u64 + k as u64,
                );
                (idx, trial_seed)
            })
            .collect();
        let results: Vec<TrialResult> = pool.install(|| {
            picks
                .par_iter()
                .map(|&(idx, trial_seed)| {
                    run_trial(
                        &train_tasks[idx],
                        &cfg.env,
                        &encoder,
                        &explore,
                        &exploit,
                        &trial_opts,
                        trial_seed,
                    )
                })
                .collect::<Result<Vec<_>, _>>()
        })?;

        for r in &results {
            buffer.insert(TrialRecord { trial: r.trial.clone(), insert_epoch: inference_epoch })?;
        }
        frames += (results.len() * trial_len) as u64;

        // --- policy updates
        let mut explore_samples = Vec::new();
        let mut exploit_samples = Vec::new();
        for (k, r) in results.iter().enumerate() {
            for s in &r.steps {
                let sample = Sample {
                    features: s.features.clone(),
                    action: s.action,
                    log_prob: s.log_prob,
                    value: s.value,
                    reward: s.shaped_reward,
                    episode_id: k * episodes + s.episode_index,
                };
                if s.episode_index == 0 && variant.use_exploration() {
                    explore_samples.push(sample);
                } else {
                    exploit_samples.push(sample);
                }
            }
        }
        let mut explore_diag = PpoDiag::default();
        if !explore_samples.is_empty() {
            let batch =
                RolloutBatch::from_samples(explore_samples, cfg.ppo.gamma, cfg.ppo.gae_lambda);
            explore_diag = ppo_update(
                &mut explore,
                &mut explore_opt,
                &batch,
                &cfg.ppo,
                seed_for(cfg.seed, "ppo-explore", iter),
            )?;
        }
        // trials always have N >= 1 exploitation episodes
        let exploit_batch =
            RolloutBatch::from_samples(exploit_samples, cfg.ppo.gamma, cfg.ppo.gae_lambda);
        let exploit_diag = ppo_update(
            &mut exploit,
            &mut exploit_opt,
            &exploit_batch,
            &cfg.ppo,
            seed_for(cfg.seed, "ppo-exploit", iter),
        )?;

        // --- inference updates on fresh buffer batches
        let mut inf_diag = InferenceDiag::default();
        for sub in 0..inference_cfg.updates_per_iteration as u64 {
            let step_id = iter * inference_cfg.updates_per_iteration as u64 + sub;
            let batch = buffer
                .sample_batch(inference_cfg.batch_size, seed_for(cfg.seed, "cbvi-batch", step_id))?;
            let trials: Vec<_> = batch.into_iter().map(|r| r.trial).collect();
            inf_diag = pool.install(|| {
                inference_update(
                    &mut encoder,
                    &mut prior,
                    &mut decoders,
                    &mut inference_opt,
                    &trials,
                    &loss_opts,
                    seed_for(cfg.seed, "cbvi-update", step_id),
                )
            })?;
            inference_epoch += 1;
            prior.sync_target(inference_epoch, inference_cfg.target_sync_interval);
            if inference_epoch == inference_cfg.prior_reseed_epoch {
                let mut reseed_rng = rng::stream(cfg.seed, "prior-reseed", inference_epoch);
                prior.reseed_spread(&inf_diag.codes, &mut reseed_rng);
            } else if inference_cfg.revival_threshold > 0.0
                && inference_cfg.revival_interval > 0
                && inference_epoch % inference_cfg.revival_interval == 0
            {
                let mut revive_rng = rng::stream(cfg.seed, "revival", inference_epoch);
                prior.revive_empty(
                    &inf_diag.cluster_usage,
                    &inf_diag.codes,
                    inference_cfg.revival_threshold,
                    &mut revive_rng,
                );
            }
        }

        // --- evaluation + metrics
        let is_last = iter + 1 == cfg.trainer.iterations;
        if iter % cfg.trainer.eval_interval == 0 || is_last {
            let report = pool.install(|| {
                evaluate(
                    &encoder,
                    &explore,
                    &exploit,
                    &test_tasks,
                    &cfg.env,
                    &trial_opts,
                    seed_for(cfg.seed, "eval", iter),
                    &fingerprint,
                )
            })?;
            let train_ep_mean = |e: usize| {
                results.iter().map(|r| r.episode_returns[e]).sum::<f64>() / results.len() as f64
            };
            metrics.write_record(&MetricRecord {
                iteration: iter,
                frames,
                test_return_ep1: report.episode_mean_return[0],
                test_return_ep2: report.episode_mean_return[1],
                nmi: report.end_nmi,
                train_return_ep1: train_ep_mean(0),
                train_return_ep2: train_ep_mean(1),
                elbo_objective: inf_diag.objective,
                recon_loglik: inf_diag.recon_loglik,
                latent_kl: inf_diag.latent_kl,
                cluster_kl: inf_diag.cluster_kl,
                in_trial: inf_diag.in_trial,
                prior_reg: inf_diag.prior_reg,
                explore_policy_loss: explore_diag.policy_loss,
                explore_value_loss: explore_diag.value_loss,
                exploit_policy_loss: exploit_diag.policy_loss,
                exploit_value_loss: exploit_diag.value_loss,
            })?;
            last_eval = Some(report);
        }

        // --- checkpoints
        if (iter + 1) % cfg.trainer.checkpoint_interval == 0 && !is_last {
            let cp = snapshot(
                &fingerprint,
                iter + 1,
                frames,
                inference_epoch,
                &encoder,
                &prior,
                &decoders,
                &explore,
                &exploit,
                &inference_opt,
                &explore_opt,
                &exploit_opt,
            );
            cp.save(&run_dir.join(format!("checkpoint-{:06}.json", iter + 1)))?;
        }
    }

    let checkpoint = snapshot(
        &fingerprint,
        cfg.trainer.iterations,
        frames,
        inference_epoch,
        &encoder,
        &prior,
        &decoders,
        &explore,
        &exploit,
        &inference_opt,
        &explore_opt,
        &exploit_opt,
    );
    let checkpoint_path = run_dir.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;

    let final_eval = last_eval.expect("at least one evaluation ran");
    final_eval.save(&run_dir.join("eval.json"))?;

    Ok(TrainOutcome { run_dir, checkpoint_path, metrics_path, checkpoint, final_eval })
}

#[allow(clippy::too_many_arguments)]
fn snapshot(
    fingerprint: &str,
    iteration: u64,
    frames: u64,
    inference_epoch: u64,
    encoder: &TrajectoryEncoder,
    prior: &ClusterPrior,
    decoders: &Decoders,
    explore: &GaussianPolicy,
    exploit: &GaussianPolicy,
    inference_opt: &Adam,
    explore_opt: &Adam,
    exploit_opt: &Adam,
) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        fingerprint: fingerprint.to_string(),
        iteration,
        frames,
        inference_epoch,
        encoder: encoder.clone(),
        prior: prior.clone(),
        decoders: decoders.clone(),
        explore_policy: explore.clone(),
        exploit_policy: exploit.clone(),
        inference_opt: inference_opt.clone(),
        explore_opt: explore_opt.clone(),
        exploit_opt: exploit_opt.clone(),
    }
}

/// Rebuilds the trial options a checkpoint's config implies, for evaluation.
pub fn trial_options_for(cfg: &RunConfig, mode: RolloutMode) -> TrialOptions {
    TrialOptions {
        n_exploitation: cfg.trainer.n_exploitation_episodes,
        mode,
        use_exploration_policy: cfg.trainer.variant.use_exploration(),
        schedule: cfg.intrinsic,
        consistency_reward_off: cfg.trainer.variant.consistency_reward_off(),
    }
}
