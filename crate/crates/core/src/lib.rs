//! Meta-reinforcement learning with exploratory task clustering.
//!
//! Tasks are drawn from a finite mixture; the agent infers the cluster and
//! task identity of a fresh environment from its ongoing trajectory via
//! cluster-based variational inference, drives a dedicated exploration
//! policy with cluster-uncertainty-reducing intrinsic rewards, and adapts
//! an exploitation policy inside the identified cluster. Everything runs at
//! desk scale on 2D point-robot environments.

pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod eval;
pub mod graph;
pub mod inference;
pub mod intrinsic;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod trajectory;
pub mod trial;

pub use buffer::{TrialBuffer, TrialRecord};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, TrainerConfig, Variant};
pub use env::{EnvConfig, EnvState, PointEnv, StepResult};
pub use eval::{evaluate, nmi, EvalReport};
pub use inference::{ClusterPrior, Decoders, InferenceConfig, PosteriorState, TrajectoryEncoder};
pub use intrinsic::DecaySchedule;
pub use policy::{GaussianPolicy, PolicyConfig};
pub use ppo::PpoConfig;
pub use tasks::{MixtureConfig, TaskFamily, TaskKind, TaskSpec};
pub use tensor::Tensor;
pub use trainer::{meta_train, TrainError, TrainOutcome};
pub use trajectory::{Trajectory, Transition, Trial};
pub use trial::{run_trial, RolloutMode, StepRecord, TrialOptions, TrialResult};
