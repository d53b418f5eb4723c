//! Mixture task distribution: clusters of related MDPs and meta splits.
//!
//! A task is drawn in two steps: first a cluster from the mixture weights,
//! then reward parameters (a goal position) or transition parameters (a
//! dynamics perturbation) from that cluster's component distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Number of dynamics parameter sets (action gain, action rotation, drift,
/// control noise).
pub const PARAM_SET_COUNT: usize = 4;

/// Number of scalar parameters perturbed by each dynamics set.
pub fn param_set_len(set: usize) -> usize {
    match set {
        2 => 2, // drift is a 2D vector
        _ => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// Dense goal reward, goals in angular clusters on a circle.
    GoalClustered,
    /// Same goals, sparse L1 reward inside a threshold region.
    GoalSparse,
    /// Dense goal reward, goals uniform on the circle (no true clusters).
    GoalUniform,
    /// Shared goal, clustered perturbations of the transition function.
    DynamicsClustered,
}

impl TaskFamily {
    pub fn is_goal(self) -> bool {
        !matches!(self, TaskFamily::DynamicsClustered)
    }
}

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("num_clusters must be >= 1")]
    NoClusters,
    #[error("mixture weights must have length {expected}, got {got}")]
    WeightLength { expected: usize, got: usize },
    #[error("mixture weights must be nonnegative and sum to 1 (sum = {sum})")]
    BadWeights { sum: f64 },
    #[error("angle_means must have length {expected}, got {got}")]
    AngleMeanLength { expected: usize, got: usize },
    #[error("standard deviations must be positive")]
    NonPositiveStd,
    #[error("param_sets entries must be < {PARAM_SET_COUNT}")]
    BadParamSet,
    #[error("radius must be positive")]
    BadRadius,
}

/// The task mixture. Empty `weights`, `angle_means`, or `param_sets` mean
/// "use the defaults derived from `num_clusters`": uniform weights, evenly
/// spaced angle centers, and parameter set `c % 4` for cluster `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub num_clusters: usize,
    pub family: TaskFamily,
    #[serde(default)]
    pub weights: Vec<f64>,
    /// Per-cluster angle centers in half-turn units (1.0 = 180 degrees).
    #[serde(default)]
    pub angle_means: Vec<f64>,
    #[serde(default = "default_angle_std")]
    pub angle_std: f64,
    /// Per-cluster dynamics parameter set indices.
    #[serde(default)]
    pub param_sets: Vec<usize>,
    #[serde(default = "default_multiplier_mean")]
    pub multiplier_mean: f64,
    #[serde(default = "default_multiplier_std")]
    pub multiplier_std: f64,
    /// Goal circle radius in length units.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// L1 reward region size for the sparse family.
    #[serde(default = "default_sparse_threshold")]
    pub sparse_threshold: f64,
}

fn default_angle_std() -> f64 {
    0.2
}
fn default_multiplier_mean() -> f64 {
    3.0
}
fn default_multiplier_std() -> f64 {
    1.5
}
fn default_radius() -> f64 {
    2.0
}
fn default_sparse_threshold() -> f64 {
    3.0
}

impl MixtureConfig {
    pub fn new(num_clusters: usize, family: TaskFamily) -> Self {
        Self {
            num_clusters,
            family,
            weights: Vec::new(),
            angle_means: Vec::new(),
            angle_std: default_angle_std(),
            param_sets: Vec::new(),
            multiplier_mean: default_multiplier_mean(),
            multiplier_std: default_multiplier_std(),
            radius: default_radius(),
            sparse_threshold: default_sparse_threshold(),
        }
    }

    pub fn validate(&self) -> Result<(), MixtureError> {
        if self.num_clusters == 0 {
            return Err(MixtureError::NoClusters);
        }
        if !self.weights.is_empty() {
            if self.weights.len() != self.num_clusters {
                return Err(MixtureError::WeightLength {
                    expected: self.num_clusters,
                    got: self.weights.len(),
                });
            }
            let sum: f64 = self.weights.iter().sum();
            if self.weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(MixtureError::BadWeights { sum });
            }
        }
        if !self.angle_means.is_empty() && self.angle_means.len() != self.num_clusters {
            return Err(MixtureError::AngleMeanLength {
                expected: self.num_clusters,
                got: self.angle_means.len(),
            });
        }
        if self.angle_std <= 0.0 || self.multiplier_std <= 0.0 {
            return Err(MixtureError::NonPositiveStd);
        }
        if self.param_sets.iter().any(|&s| s >= PARAM_SET_COUNT) {
            return Err(MixtureError::BadParamSet);
        }
        if self.radius <= 0.0 {
            return Err(MixtureError::BadRadius);
        }
        Ok(())
    }

    pub fn weight(&self, c: usize) -> f64 {
        if self.weights.is_empty() {
            1.0 / self.num_clusters as f64
        } else {
            self.weights[c]
        }
    }

    /// Cluster angle center in half-turn units. Defaults space the centers
    /// evenly, e.g. {0.25, 0.75, 1.25, 1.75} for four clusters.
    pub fn angle_mean(&self, c: usize) -> f64 {
        if self.angle_means.is_empty() {
            2.0 * (c as f64 + 0.5) / self.num_clusters as f64
        } else {
            self.angle_means[c]
        }
    }

    pub fn param_set(&self, c: usize) -> usize {
        if self.param_sets.is_empty() {
            c % PARAM_SET_COUNT
        } else {
            self.param_sets[c]
        }
    }
}

/// A concrete sampled MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u64,
    pub cluster_id: usize,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    Goal { goal: [f64; 2], sparse_threshold: Option<f64> },
    Dynamics { param_set: usize, multipliers: Vec<f64> },
}

/// Goal position for an angle in half-turn units on a circle of `radius`.
pub fn goal_for_angle(radius: f64, theta: f64) -> [f64; 2] {
    let rad = theta * std::f64::consts::PI;
    [radius * rad.cos(), radius * rad.sin()]
}

fn sample_cluster_id(cfg: &MixtureConfig, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for c in 0..cfg.num_clusters {
        acc += cfg.weight(c);
        if u < acc {
            return c;
        }
    }
    cfg.num_clusters - 1
}

/// Draws one task. The task id doubles as the sampling seed, so the same
/// (config, seed) pair always yields the same task.
pub fn sample_task(cfg: &MixtureConfig, seed: u64) -> TaskSpec {
    let mut rng = rng::stream(seed, "task-spec", 0);
    let cluster_id = sample_cluster_id(cfg, &mut rng);
    let kind = match cfg.family {
        TaskFamily::GoalClustered | TaskFamily::GoalSparse => {
            let theta = rng::normal(&mut rng, cfg.angle_mean(cluster_id), cfg.angle_std);
            let threshold =
                (cfg.family == TaskFamily::GoalSparse).then_some(cfg.sparse_threshold);
            TaskKind::Goal { goal: goal_for_angle(cfg.radius, theta), sparse_threshold: threshold }
        }
        TaskFamily::GoalUniform => {
            let theta: f64 = rng.random_range(0.0..2.0);
            TaskKind::Goal { goal: goal_for_angle(cfg.radius, theta), sparse_threshold: None }
        }
        TaskFamily::DynamicsClustered => {
            let set = cfg.param_set(cluster_id);
            let multipliers = (0..param_set_len(set))
                .map(|_| rng::normal(&mut rng, cfg.multiplier_mean, cfg.multiplier_std))
                .collect();
            TaskKind::Dynamics { param_set: set, multipliers }
        }
    };
    TaskSpec { task_id: seed, cluster_id, kind }
}

/// Meta-train / meta-test split with disjoint task id ranges, both drawn
/// from the same mixture.
pub fn make_meta_split(
    cfg: &MixtureConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> (Vec<TaskSpec>, Vec<TaskSpec>) {
    assert!(n_train > 0 && n_test > 0, "split sizes must be positive");
    let id_seed = |i: u64| {
        // Mix the split seed into per-task seeds while keeping ids sequential.
        let mut bytes = Vec::with_capacity(16);
        bytes.extend_from_slice(&seed.to_le_bytes());
        bytes.extend_from_slice(&i.to_le_bytes());
        rng::fnv1a64(&bytes)
    };
    // `..` keeps the sampled cluster/kind; the sequential id replaces the seed.
    let train: Vec<TaskSpec> = (0..n_train as u64)
        .map(|i| TaskSpec { task_id: i, ..sample_task(cfg, id_seed(i)) })
        .collect();
    let test: Vec<TaskSpec> = (0..n_test as u64)
        .map(|i| {
            let id = n_train as u64 + i;
            TaskSpec { task_id: id, ..sample_task(cfg, id_seed(id)) }
        })
        .collect();
    (train, test)
}
