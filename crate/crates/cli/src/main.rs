//! Command-line driver: train runs, evaluate checkpoints, run the ablation
//! matrix and cluster-count sweep, and render plots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use metaclust_core::checkpoint::Checkpoint;
use metaclust_core::config::RunConfig;
use metaclust_core::eval::{self, evaluate, AblationTable, SweepTable, SWEEP_CLUSTER_COUNTS};
use metaclust_core::plot::write_run_plots;
use metaclust_core::trainer::{meta_split_for, meta_train, trial_options_for};
use metaclust_core::trial::RolloutMode;

#[derive(Parser)]
#[command(name = "metaclust", version, about = "Meta-RL with exploratory task clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train with the given config file.
    Train {
        /// Path to a TOML run config.
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out tasks of a config.
    Eval {
        /// Path to a checkpoint JSON file.
        checkpoint: PathBuf,
        /// Path to the TOML run config that produced it.
        config: PathBuf,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        config: PathBuf,
    },
    /// Train with the modeled cluster count swept over {2, 4, 6, 8, 10}.
    SweepClusters {
        config: PathBuf,
    },
    /// Render learning-curve, NMI, and trace plots for a finished run.
    Plot {
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let outcome = meta_train(&cfg)?;
            println!("run dir:    {}", outcome.run_dir.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("metrics:    {}", outcome.metrics_path.display());
            print_eval_summary(&outcome.final_eval);
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            let cp = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            if cp.fingerprint != cfg.fingerprint() {
                eprintln!(
                    "warning: checkpoint fingerprint {} does not match config {}",
                    cp.fingerprint,
                    cfg.fingerprint()
                );
            }
            let (_, test_tasks) = meta_split_for(&cfg);
            let report = evaluate(
                &cp.encoder,
                &cp.explore_policy,
                &cp.exploit_policy,
                &test_tasks,
                &cfg.env,
                &trial_options_for(&cfg, RolloutMode::Test),
                eval::eval_seed(cfg.seed),
                &cp.fingerprint,
            )?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let out = cfg.output_dir.join(format!("eval-{:06}.json", cp.iteration));
            report.save(&out)?;
            println!("report: {}", out.display());
            print_eval_summary(&report);
        }
        Command::Ablate { config } => {
            let cfg = load_config(&config)?;
            let table = eval::run_ablations(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let out = cfg.output_dir.join("ablations.json");
            save_json(&out, &table)?;
            print_ablation_table(&table);
            println!("table: {}", out.display());
        }
        Command::SweepClusters { config } => {
            let cfg = load_config(&config)?;
            let table = eval::sweep_clusters(&cfg, &SWEEP_CLUSTER_COUNTS)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let out = cfg.output_dir.join("cluster-sweep.json");
            save_json(&out, &table)?;
            print_sweep_table(&table);
            println!("table: {}", out.display());
        }
        Command::Plot { run_dir } => {
            if !run_dir.join("metrics.jsonl").exists() {
                bail!("{} does not look like a run directory (no metrics.jsonl)", run_dir.display());
            }
            for path in write_run_plots(&run_dir)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn print_eval_summary(report: &metaclust_core::EvalReport) {
    for (i, (mean, se)) in report
        .episode_mean_return
        .iter()
        .zip(report.episode_stderr_return.iter())
        .enumerate()
    {
        println!("episode {} return: {mean:.3} +/- {se:.3}", i + 1);
    }
    println!("end-of-exploration NMI: {:.3}", report.end_nmi);
}

fn print_ablation_table(table: &AblationTable) {
    println!("{:<24} {:>14} {:>14} {:>8}", "variant", "ep1 return", "ep2 return", "NMI");
    for row in &table.rows {
        println!(
            "{:<24} {:>7.2} ({:>4.2}) {:>7.2} ({:>4.2}) {:>8.3}",
            row.variant,
            row.episode_mean_return[0],
            row.episode_stderr_return[0],
            row.episode_mean_return[1],
            row.episode_stderr_return[1],
            row.end_nmi,
        );
    }
}

fn print_sweep_table(table: &SweepTable) {
    println!("{:<10} {:>14} {:>14} {:>8}", "clusters", "ep1 return", "ep2 return", "NMI");
    for row in &table.rows {
        println!(
            "{:<10} {:>7.2} ({:>4.2}) {:>7.2} ({:>4.2}) {:>8.3}",
            row.num_clusters,
            row.episode_mean_return[0],
            row.episode_stderr_return[0],
            row.episode_mean_return[1],
            row.episode_stderr_return[1],
            row.end_nmi,
        );
    }
}
