//! Run configuration: one TOML file holds every tunable, with defaults
//! from the reference hyperparameter set. Unknown keys are rejected and a
//! stable fingerprint of the serialized config stamps every artifact a run
//! emits.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::inference::InferenceConfig;
use crate::intrinsic::DecaySchedule;
use crate::policy::PolicyConfig;
use crate::ppo::PpoConfig;
use crate::rng::fnv1a64;
use crate::tasks::MixtureConfig;

/// Ablation/variant selector for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// The complete method.
    Full,
    /// Exploitation policy rolls every episode; no intrinsic rewards.
    NoExploration,
    /// One shared RNN feeds both inference heads.
    SingleGru,
    /// Consistency regularizer weights forced to zero.
    NoConsistencyReg,
    /// Consistency intrinsic reward disabled.
    NoConsistencyReward,
    /// Mixture-latent inference without exploration policy or stacked RNN;
    /// the single-mode-style baseline made cluster-aware.
    GmVaeBaseline,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::GmVaeBaseline,
        Variant::NoExploration,
        Variant::SingleGru,
        Variant::NoConsistencyReg,
        Variant::NoConsistencyReward,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoExploration => "no-exploration",
            Variant::SingleGru => "single-gru",
            Variant::NoConsistencyReg => "no-consistency-reg",
            Variant::NoConsistencyReward => "no-consistency-reward",
            Variant::GmVaeBaseline => "gm-vae-baseline",
        }
    }

    pub fn use_exploration(self) -> bool {
        !matches!(self, Variant::NoExploration | Variant::GmVaeBaseline)
    }

    pub fn stacked(self) -> bool {
        !matches!(self, Variant::SingleGru | Variant::GmVaeBaseline)
    }

    pub fn consistency_reg_off(self) -> bool {
        matches!(self, Variant::NoConsistencyReg)
    }

    pub fn consistency_reward_off(self) -> bool {
        matches!(self, Variant::NoConsistencyReward)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_trials_per_iteration")]
    pub trials_per_iteration: usize,
    #[serde(default = "default_n_train_tasks")]
    pub n_train_tasks: usize,
    #[serde(default = "default_n_test_tasks")]
    pub n_test_tasks: usize,
    /// Exploitation episodes per trial (N).
    #[serde(default = "default_n_exploitation")]
    pub n_exploitation_episodes: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

fn default_iterations() -> u64 {
    2000
}
fn default_trials_per_iteration() -> usize {
    8
}
fn default_n_train_tasks() -> usize {
    500
}
fn default_n_test_tasks() -> usize {
    32
}
fn default_n_exploitation() -> usize {
    1
}
fn default_eval_interval() -> u64 {
    100
}
fn default_checkpoint_interval() -> u64 {
    500
}
fn default_workers() -> usize {
    8
}
fn default_variant() -> Variant {
    Variant::Full
}

impl Default for TrainerConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub mixture: MixtureConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub intrinsic: DecaySchedule,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

fn default_seed() -> u64 {
    7
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config values:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("cannot serialize config: {0}")]
    Format(#[from] toml::ser::Error),
}

impl RunConfig {
    /// A minimal valid config for the given mixture.
    pub fn for_mixture(mixture: MixtureConfig) -> Self {
        let mut cfg: RunConfig =
            toml::from_str("[mixture]\nnum_clusters = 1\nfamily = \"goal-clustered\"")
                .expect("template parses");
        cfg.mixture = mixture;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(e) = self.mixture.validate() {
            problems.push(format!("mixture: {e}"));
        }
        if self.env.horizon == 0 {
            problems.push("env.horizon: must be positive".into());
        }
        if self.env.action_limit <= 0.0 {
            problems.push("env.action_limit: must be positive".into());
        }
        if self.inference.num_clusters == 0 {
            problems.push("inference.num_clusters: must be positive".into());
        }
        if self.inference.latent_dim == 0 {
            problems.push("inference.latent_dim: must be positive".into());
        }
        if self.inference.elbo_stride == 0 {
            problems.push("inference.elbo_stride: must be positive".into());
        }
        if self.inference.batch_size == 0 {
            problems.push("inference.batch_size: must be positive".into());
        }
        if self.inference.buffer_capacity == 0 {
            problems.push("inference.buffer_capacity: must be positive".into());
        }
        if self.inference.gumbel_temperature <= 0.0 {
            problems.push("inference.gumbel_temperature: must be positive".into());
        }
        if self.inference.mc_samples == 0 {
            problems.push("inference.mc_samples: must be positive".into());
        }
        if self.inference.lambda_state < 0.0 {
            problems.push("inference.lambda_state: must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.ppo.gamma) && self.ppo.gamma != 1.0 {
            problems.push("ppo.gamma: must lie in [0, 1]".into());
        }
        if self.ppo.clip_ratio <= 0.0 {
            problems.push("ppo.clip_ratio: must be positive".into());
        }
        if self.ppo.epochs == 0 || self.ppo.minibatch_size == 0 {
            problems.push("ppo.epochs/minibatch_size: must be positive".into());
        }
        if self.trainer.iterations == 0 {
            problems.push("trainer.iterations: must be positive".into());
        }
        if self.trainer.trials_per_iteration == 0 {
            problems.push("trainer.trials_per_iteration: must be positive".into());
        }
        if self.trainer.n_train_tasks == 0 || self.trainer.n_test_tasks == 0 {
            problems.push("trainer.n_train_tasks/n_test_tasks: must be positive".into());
        }
        if self.trainer.n_exploitation_episodes == 0 {
            problems.push("trainer.n_exploitation_episodes: must be at least 1".into());
        }
        if self.trainer.workers == 0 {
            problems.push("trainer.workers: must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// Inference config with the variant's structural switches applied.
    pub fn resolved_inference(&self) -> InferenceConfig {
        let mut inf = self.inference.clone();
        let v = self.trainer.variant;
        inf.stacked = inf.stacked && v.stacked();
        if v.consistency_reg_off() {
            inf.lambda_i = 0.0;
            inf.lambda_p = 0.0;
        }
        inf
    }

    /// Policy input width: position, latent sample, cluster probabilities.
    pub fn policy_input_dim(&self) -> usize {
        2 + self.inference.latent_dim + self.inference.num_clusters
    }

    /// Stable hash of the serialized config; identical configs (including
    /// seed) produce identical fingerprints.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}
