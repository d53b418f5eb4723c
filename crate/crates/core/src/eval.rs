//! Cluster-inference quality metrics, held-out evaluation, and the
//! ablation / cluster-count experiment orchestration.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::env::{EnvConfig, EnvError};
use crate::inference::TrajectoryEncoder;
use crate::policy::GaussianPolicy;
use crate::rng;
use crate::tasks::{TaskKind, TaskSpec};
use crate::trainer::{meta_train, TrainError};
use crate::trial::{run_trial, RolloutMode, TrialOptions};

/// Normalized mutual information between true and inferred cluster labels,
/// normalized by the geometric mean of the marginal entropies. Returns 0
/// when either marginal entropy is zero or the mutual information is zero.
pub fn nmi(assignments: &[(usize, usize)]) -> f64 {
    assert!(assignments.len() >= 2, "need at least two assignments");
    let n = assignments.len() as f64;

    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut left: HashMap<usize, usize> = HashMap::new();
    let mut right: HashMap<usize, usize> = HashMap::new();
    for &(a, b) in assignments {
        *joint.entry((a, b)).or_default() += 1;
        *left.entry(a).or_default() += 1;
        *right.entry(b).or_default() += 1;
    }

    let h = |counts: &HashMap<usize, usize>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_left = h(&left);
    let h_right = h(&right);
    if h_left <= 0.0 || h_right <= 0.0 {
        return 0.0;
    }

    let mut mi = 0.0;
    for (&(a, b), &c) in &joint {
        let p = c as f64 / n;
        let pa = left[&a] as f64 / n;
        let pb = right[&b] as f64 / n;
        mi += p * (p / (pa * pb)).ln();
    }
    let mi = mi.max(0.0);
    if mi == 0.0 {
        0.0
    } else {
        mi / (h_left * h_right).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub task_id: u64,
    pub true_cluster: usize,
    pub inferred_cluster: usize,
}

/// Exploration-episode trace of one task, colored by the final inferred
/// cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task_id: u64,
    pub inferred_cluster: usize,
    pub goal: Option<[f64; 2]>,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    /// Mean environment return per episode position (0 = exploration).
    pub episode_mean_return: Vec<f64>,
    /// Standard error of the per-task returns.
    pub episode_stderr_return: Vec<f64>,
    /// NMI between true and inferred clusters after each exploration step.
    pub nmi_curve: Vec<f64>,
    /// NMI at the end of the exploration episode.
    pub end_nmi: f64,
    pub assignments: Vec<AssignmentRow>,
    pub traces: Vec<TaskTrace>,
    /// Per-task, per-episode environment returns.
    pub per_task_returns: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)
            .map_err(std::io::Error::other)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let file = std::fs::File::open(path)?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(std::io::Error::other)
    }
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs the meta-test protocol on every task: deterministic cluster choice,
/// per-episode returns, the per-step NMI curve, and 2D traces. Never
/// mutates the networks.
pub fn evaluate(
    encoder: &TrajectoryEncoder,
    explore: &GaussianPolicy,
    exploit: &GaussianPolicy,
    tasks: &[TaskSpec],
    env_cfg: &EnvConfig,
    opts: &TrialOptions,
    seed: u64,
    fingerprint: &str,
) -> Result<EvalReport, EnvError> {
    let opts = TrialOptions { mode: RolloutMode::Test, ..opts.clone() };
    let results: Vec<_> = tasks
        .par_iter()
        .map(|task| run_trial(task, env_cfg, encoder, explore, exploit, &opts, seed))
        .collect::<Result<Vec<_>, _>>()?;

    let episodes = opts.n_exploitation + 1;
    let mut per_task_returns = Vec::with_capacity(tasks.len());
    let mut assignments = Vec::with_capacity(tasks.len());
    let mut traces = Vec::with_capacity(tasks.len());
    for (task, r) in tasks.iter().zip(results.iter()) {
        per_task_returns.push(r.episode_returns.clone());
        let exploration: Vec<_> = r.exploration_steps().collect();
        assignments.push(AssignmentRow {
            task_id: task.task_id,
            true_cluster: task.cluster_id,
            inferred_cluster: exploration.last().expect("nonempty episode").inferred_cluster,
        });
        let mut points = vec![exploration[0].state];
        points.extend(exploration.iter().map(|s| {
            let t = &r.trial.episodes[0].transitions[s.step_index];
            t.next_state
        }));
        let goal = match &task.kind {
            TaskKind::Goal { goal, .. } => Some(*goal),
            TaskKind::Dynamics { .. } => None,
        };
        traces.push(TaskTrace {
            task_id: task.task_id,
            inferred_cluster: assignments.last().unwrap().inferred_cluster,
            goal,
            points,
        });
    }

    // per-step NMI over the exploration episode
    let nmi_curve: Vec<f64> = (0..env_cfg.horizon)
        .map(|t| {
            let pairs: Vec<(usize, usize)> = tasks
                .iter()
                .zip(results.iter())
                .map(|(task, r)| (task.cluster_id, r.steps[t].inferred_cluster))
                .collect();
            nmi(&pairs)
        })
        .collect();
    let end_nmi = *nmi_curve.last().expect("nonzero horizon");

    let mut episode_mean_return = Vec::with_capacity(episodes);
    let mut episode_stderr_return = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let vals: Vec<f64> = per_task_returns.iter().map(|r| r[e]).collect();
        let (m, s) = mean_stderr(&vals);
        episode_mean_return.push(m);
        episode_stderr_return.push(s);
    }

    Ok(EvalReport {
        fingerprint: fingerprint.to_string(),
        episode_mean_return,
        episode_stderr_return,
        nmi_curve,
        end_nmi,
        assignments,
        traces,
        per_task_returns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub episode_mean_return: Vec<f64>,
    pub episode_stderr_return: Vec<f64>,
    pub end_nmi: f64,
    pub lambda_i: f64,
    pub lambda_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub fingerprint: String,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates every ablation variant of the base config,
/// producing a comparison table. Each variant runs in its own subdirectory.
pub fn run_ablations(base: &RunConfig) -> Result<AblationTable, TrainError> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.trainer.variant = variant;
        cfg.output_dir = base.output_dir.join(format!("ablate-{}", variant.label()));
        let outcome = meta_train(&cfg)?;
        let resolved = cfg.resolved_inference();
        rows.push(AblationRow {
            variant: variant.label().to_string(),
            episode_mean_return: outcome.final_eval.episode_mean_return.clone(),
            episode_stderr_return: outcome.final_eval.episode_stderr_return.clone(),
            end_nmi: outcome.final_eval.end_nmi,
            lambda_i: resolved.lambda_i,
            lambda_p: resolved.lambda_p,
        });
    }
    Ok(AblationTable { fingerprint: base.fingerprint(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub num_clusters: usize,
    pub episode_mean_return: Vec<f64>,
    pub episode_stderr_return: Vec<f64>,
    pub end_nmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub fingerprint: String,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CLUSTER_COUNTS: [usize; 5] = [2, 4, 6, 8, 10];

/// Trains the full method with different modeled cluster counts on the same
/// task distribution.
pub fn sweep_clusters(base: &RunConfig, counts: &[usize]) -> Result<SweepTable, TrainError> {
    let mut rows = Vec::with_capacity(counts.len());
    for &c in counts {
        let mut cfg = base.clone();
        cfg.inference.num_clusters = c;
        cfg.output_dir = base.output_dir.join(format!("clusters-{c}"));
        let outcome = meta_train(&cfg)?;
        rows.push(SweepRow {
            num_clusters: c,
            episode_mean_return: outcome.final_eval.episode_mean_return.clone(),
            episode_stderr_return: outcome.final_eval.episode_stderr_return.clone(),
            end_nmi: outcome.final_eval.end_nmi,
        });
    }
    Ok(SweepTable { fingerprint: base.fingerprint(), rows })
}

/// Convenience used by tests and the CLI: derive an evaluation seed that is
/// independent of the training streams.
pub fn eval_seed(master: u64) -> u64 {
    use rand::Rng as _;
    rng::stream(master, "eval", 0).random()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_agreement_scores_one() {
        let pairs: Vec<(usize, usize)> = (0..32).map(|i| (i % 4, (i % 4 + 1) % 4)).collect();
        // relabeled but consistent -> still perfect dependence
        assert!((nmi(&pairs) - 1.0).abs() < 1e-12);
        let identity: Vec<(usize, usize)> = (0..32).map(|i| (i % 4, i % 4)).collect();
        assert!((nmi(&identity) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_scores_zero() {
        let pairs: Vec<(usize, usize)> = (0..32).map(|i| (i % 4, 0)).collect();
        assert_eq!(nmi(&pairs), 0.0);
    }

    #[test]
    fn independent_labels_score_zero() {
        let pairs = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
        assert_eq!(nmi(&pairs), 0.0);
    }

    #[test]
    fn nmi_is_symmetric_and_permutation_invariant() {
        let pairs = vec![(0, 1), (0, 1), (1, 0), (1, 2), (2, 2), (2, 2), (0, 1), (1, 0)];
        let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
        assert!((nmi(&pairs) - nmi(&swapped)).abs() < 1e-12);

        let relabel = |c: usize| (c + 2) % 3;
        let relabeled: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (a, relabel(b))).collect();
        assert!((nmi(&pairs) - nmi(&relabeled)).abs() < 1e-12);
    }

    #[test]
    fn nmi_matches_hand_computed_example() {
        // true = (0,0,1,1), pred = (0,0,0,1)
        // joint: p(0,0)=1/2, p(1,0)=1/4, p(1,1)=1/4; marginals (1/2,1/2) and (3/4,1/4)
        let pairs = vec![(0, 0), (0, 0), (1, 0), (1, 1)];
        let mi = 0.5 * (0.5f64 / 0.375).ln()
            + 0.25 * (0.25f64 / 0.375).ln()
            + 0.25 * (0.25f64 / 0.125).ln();
        let h_true = (2.0f64).ln();
        let h_pred: f64 = -(0.75f64.ln() * 0.75 + 0.25f64.ln() * 0.25);
        let want = mi / (h_true * h_pred).sqrt();
        assert!((nmi(&pairs) - want).abs() < 1e-12);
    }
}
