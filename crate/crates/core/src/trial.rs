//! The trial protocol: one exploration episode, then N exploitation
//! episodes in the same task, with the encoder hidden state threading
//! through all of them.
//!
//! At every step the agent samples a cluster from the current posterior
//! (Gumbel during training, argmax at meta-test), draws a task latent for
//! that cluster, and conditions the active policy on (state, latent,
//! cluster probabilities). Intrinsic rewards are attached to exploration
//! steps as they are collected.

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvError, PointEnv};
use crate::inference::encoder::{sample_cluster, sample_z, ClusterSelect, PosteriorState};
use crate::inference::TrajectoryEncoder;
use crate::intrinsic::{self, DecaySchedule};
use crate::policy::{policy_features, GaussianPolicy};
use crate::rng;
use crate::tasks::TaskSpec;
use crate::trajectory::{Trajectory, Transition, Trial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct TrialOptions {
    /// Number of exploitation episodes N (the trial has N + 1 episodes).
    pub n_exploitation: usize,
    pub mode: RolloutMode,
    /// When false, the exploitation policy rolls every episode and no
    /// shaped rewards are produced (the no-exploration ablation).
    pub use_exploration_policy: bool,
    pub schedule: DecaySchedule,
    /// Forces the consistency-reward weight to zero (ablation).
    pub consistency_reward_off: bool,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self {
            n_exploitation: 1,
            mode: RolloutMode::Train,
            use_exploration_policy: true,
            schedule: DecaySchedule::default(),
            consistency_reward_off: false,
        }
    }
}

/// Everything recorded about one step, sufficient to redo the policy
/// computation and the intrinsic rewards without re-encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub task_id: u64,
    pub episode_index: usize,
    pub step_index: usize,
    pub state: [f64; 2],
    pub action: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
    pub env_reward: f64,
    /// Exploration steps carry the composed reward; elsewhere it equals
    /// `env_reward`.
    pub shaped_reward: f64,
    /// Posterior at decision time.
    pub cluster_probs: Vec<f64>,
    /// Posterior after this transition was encoded.
    pub cluster_probs_after: Vec<f64>,
    /// argmax of `cluster_probs_after`.
    pub inferred_cluster: usize,
    /// Latent sample fed to the policy.
    pub z: Vec<f64>,
    /// Exact policy input (state, z, cluster probabilities).
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: Trial,
    pub steps: Vec<StepRecord>,
    /// Environment return of each episode.
    pub episode_returns: Vec<f64>,
    /// Belief at the start of each episode (index 0 is the fresh belief).
    pub episode_start_posteriors: Vec<PosteriorState>,
    pub final_posterior: PosteriorState,
}

impl TrialResult {
    pub fn exploration_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.episode_index == 0)
    }
}

/// Runs one trial of Alg-style episodes on `task`.
pub fn run_trial(
    task: &TaskSpec,
    env_cfg: &EnvConfig,
    encoder: &TrajectoryEncoder,
    explore: &GaussianPolicy,
    exploit: &GaussianPolicy,
    opts: &TrialOptions,
    seed: u64,
) -> Result<TrialResult, EnvError> {
    assert!(opts.n_exploitation >= 1, "a trial needs at least one exploitation episode");
    let mut rng = rng::stream(seed, "rollout", task.task_id);
    let mut env = PointEnv::new(task.clone(), *env_cfg);
    let mut ps = encoder.initial_posterior();

    let select = match opts.mode {
        RolloutMode::Train => ClusterSelect::Gumbel,
        RolloutMode::Test => ClusterSelect::Argmax,
    };

    let mut episodes = Vec::with_capacity(opts.n_exploitation + 1);
    let mut steps = Vec::new();
    let mut episode_returns = Vec::new();
    let mut episode_start_posteriors = Vec::new();

    for episode in 0..=opts.n_exploitation {
        let exploring = episode == 0 && opts.use_exploration_policy;
        let policy = if exploring { explore } else { exploit };
        episode_start_posteriors.push(ps.clone());

        let mut state = env.reset();
        let mut transitions = Vec::with_capacity(env_cfg.horizon);
        let mut env_return = 0.0;
        for step_index in 0..env_cfg.horizon {
            let cluster = sample_cluster(&ps, select, &mut rng);
            let z = sample_z(&ps, cluster.index, &mut rng);
            let probs = ps.cluster_probs();
            let features = policy_features(state.position, &z, &probs);
            let sample = policy.act(&features, &mut rng);

            let result = env.step(sample.action)?;
            let transition = Transition {
                state: state.position,
                action: sample.action,
                reward: result.reward,
                next_state: result.next_state.position,
            };
            let next_ps = encoder.encode_step(&ps, &transition);
            let probs_after = next_ps.cluster_probs();

            let shaped_reward = if exploring {
                let r_h = intrinsic::reward_entropy_reduction(&probs, &probs_after);
                let r_c = intrinsic::reward_consistency(&probs, &probs_after);
                let mut sched = opts.schedule;
                if opts.consistency_reward_off {
                    sched.a_c = 0.0;
                    sched.b_c = 0.0;
                }
                intrinsic::compose_exploration_reward(
                    result.reward,
                    r_h,
                    r_c,
                    step_index,
                    env_cfg.horizon,
                    &sched,
                )
            } else {
                result.reward
            };

            steps.push(StepRecord {
                task_id: task.task_id,
                episode_index: episode,
                step_index,
                state: state.position,
                action: sample.action,
                log_prob: sample.log_prob,
                value: sample.value,
                env_reward: result.reward,
                shaped_reward,
                inferred_cluster: next_ps.argmax_cluster(),
                cluster_probs: probs,
                cluster_probs_after: probs_after,
                z,
                features,
            });
            env_return += result.reward;
            transitions.push(transition);
            state = result.next_state;
            ps = next_ps;
        }
        episodes.push(Trajectory { transitions });
        episode_returns.push(env_return);
    }

    Ok(TrialResult {
        trial: Trial { task_id: task.task_id, cluster_id: task.cluster_id, episodes },
        steps,
        episode_returns,
        episode_start_posteriors,
        final_posterior: ps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::InferenceConfig;
    use crate::policy::PolicyConfig;
    use crate::rng::stream;
    use crate::tasks::{sample_task, MixtureConfig, TaskFamily};

    fn setup() -> (TaskSpec, EnvConfig, TrajectoryEncoder, GaussianPolicy, GaussianPolicy) {
        let mix = MixtureConfig::new(4, TaskFamily::GoalClustered);
        let task = sample_task(&mix, 3);
        let env_cfg = EnvConfig { horizon: 20, ..EnvConfig::default() };
        let inf = InferenceConfig {
            embed_dim: 8,
            cluster_rnn_hidden: 10,
            task_rnn_hidden: 10,
            latent_dim: 4,
            ..InferenceConfig::default()
        };
        let mut r = stream(0, "trial-test", 0);
        let enc = TrajectoryEncoder::new(&inf, &mut r);
        let input = 2 + inf.latent_dim + inf.num_clusters;
        let explore = GaussianPolicy::new(input, &PolicyConfig { hidden: 16 }, &mut r);
        let exploit = GaussianPolicy::new(input, &PolicyConfig { hidden: 16 }, &mut r);
        (task, env_cfg, enc, explore, exploit)
    }

    #[test]
    fn trial_has_expected_shape_and_reward_invariants() {
        let (task, env_cfg, enc, explore, exploit) = setup();
        let opts = TrialOptions::default();
        let r = run_trial(&task, &env_cfg, &enc, &explore, &exploit, &opts, 1).unwrap();
        assert_eq!(r.trial.episodes.len(), 2);
        assert_eq!(r.trial.total_len(), 40, "N=1 trials hold exactly 2H transitions");
        assert_eq!(r.steps.len(), 40);
        assert_eq!(r.episode_returns.len(), 2);
        for s in &r.steps {
            if s.episode_index > 0 {
                assert_eq!(
                    s.shaped_reward, s.env_reward,
                    "exploitation rewards must be unshaped"
                );
            }
        }
        // some exploration step should actually differ once the posterior moves
        assert!(
            r.exploration_steps().any(|s| s.shaped_reward != s.env_reward),
            "intrinsic terms never fired"
        );
    }

    #[test]
    fn exploitation_inherits_the_exploration_hidden_state() {
        let (task, env_cfg, enc, explore, exploit) = setup();
        let opts = TrialOptions::default();
        let r = run_trial(&task, &env_cfg, &enc, &explore, &exploit, &opts, 2).unwrap();
        // the belief at the start of episode 1 is the belief after the
        // H-step exploration episode: replay the encoder to verify
        let mut ps = enc.initial_posterior();
        for t in &r.trial.episodes[0].transitions {
            ps = enc.encode_step(&ps, t);
        }
        let handoff = &r.episode_start_posteriors[1];
        assert_eq!(ps.h_alpha, handoff.h_alpha);
        assert_eq!(ps.h_beta, handoff.h_beta);
    }

    #[test]
    fn test_mode_is_deterministic_given_seed() {
        let (task, env_cfg, enc, explore, exploit) = setup();
        let opts = TrialOptions { mode: RolloutMode::Test, ..TrialOptions::default() };
        let a = run_trial(&task, &env_cfg, &enc, &explore, &exploit, &opts, 5).unwrap();
        let b = run_trial(&task, &env_cfg, &enc, &explore, &exploit, &opts, 5).unwrap();
        assert_eq!(a.trial, b.trial);
        assert_eq!(a.episode_returns, b.episode_returns);
    }

    #[test]
    fn disabled_exploration_rolls_exploit_policy_everywhere() {
        let (task, env_cfg, enc, explore, exploit) = setup();
        let opts = TrialOptions { use_exploration_policy: false, ..TrialOptions::default() };
        let r = run_trial(&task, &env_cfg, &enc, &explore, &exploit, &opts, 7).unwrap();
        for s in &r.steps {
            assert_eq!(s.shaped_reward, s.env_reward);
        }
        // identical seeds with a scrambled exploration policy change nothing
        let mut other = explore.clone();
        for t in other.tensors_mut() {
            for x in t.data.iter_mut() {
                *x += 1.0;
            }
        }
        let r2 = run_trial(&task, &env_cfg, &enc, &other, &exploit, &opts, 7).unwrap();
        assert_eq!(r.trial, r2.trial);
    }

    #[test]
    fn recorded_policy_statistics_recompute_exactly() {
        let (task, env_cfg, enc, explore, exploit) = setup();
        let opts = TrialOptions::default();
        let r = run_trial(&task, &env_cfg, &enc, &explore, &exploit, &opts, 9).unwrap();
        for s in &r.steps {
            let policy = if s.episode_index == 0 { &explore } else { &exploit };
            let (lp, v) = policy.evaluate_plain(&s.features, s.action);
            assert!((lp - s.log_prob).abs() < 1e-12);
            assert!((v - s.value).abs() < 1e-12);
        }
    }
}
