//! Manual diagnostic: train the inference stack alone on a fixed buffer of
//! random-walk trials and watch code quality / cluster recovery, without
//! the policy-learning loop.
//!
//! Run with:
//!   cargo test -p metaclust-core --test diag_vae -- --ignored --nocapture

use rand::Rng as _;

use metaclust_core::env::{EnvConfig, PointEnv};
use metaclust_core::eval::nmi;
use metaclust_core::inference::{
    inference_update, ClusterPrior, Decoders, InferenceConfig, Relaxation, TrajectoryEncoder,
};
use metaclust_core::nn::Adam;
use metaclust_core::rng;
use metaclust_core::tasks::{make_meta_split, MixtureConfig, TaskFamily, TaskSpec};
use metaclust_core::trajectory::{Trajectory, Transition, Trial};

fn random_trial(task: &TaskSpec, env_cfg: &EnvConfig, seed: u64) -> Trial {
    let mut rng = rng::stream(seed, "diag-rollout", task.task_id);
    let mut env = PointEnv::new(task.clone(), *env_cfg);
    let goal = match &task.kind {
        metaclust_core::tasks::TaskKind::Goal { goal, .. } => *goal,
        _ => [2.0, 0.0],
    };
    let mut episodes = Vec::new();
    for episode in 0..2 {
        let mut state = env.reset();
        let mut transitions = Vec::new();
        // episode 0: drifting random walk (exploration-ish coverage);
        // episode 1: noisy pursuit, like a partially trained policy
        let drift = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
        for _ in 0..env_cfg.horizon {
            let action = if episode == 0 {
                [
                    drift[0] + rng.random_range(-0.05..0.05),
                    drift[1] + rng.random_range(-0.05..0.05),
                ]
            } else {
                let dx = goal[0] - state.position[0];
                let dy = goal[1] - state.position[1];
                let norm = (dx * dx + dy * dy).sqrt().max(1e-6);
                [
                    0.08 * dx / norm + rng.random_range(-0.04..0.04),
                    0.08 * dy / norm + rng.random_range(-0.04..0.04),
                ]
            };
            let r = env.step(action).unwrap();
            transitions.push(Transition {
                state: state.position,
                action,
                reward: r.reward,
                next_state: r.next_state.position,
            });
            state = r.next_state;
        }
        episodes.push(Trajectory { transitions });
    }
    Trial { task_id: task.task_id, cluster_id: task.cluster_id, episodes }
}

#[test]
#[ignore]
fn vae_only_training() {
    let updates: usize = std::env::var("DIAG_UPDATES").map(|v| v.parse().unwrap()).unwrap_or(1500);
    let recon_mode = std::env::var("DIAG_RECON").unwrap_or_else(|_| "sampled".into());
    let revival: f64 =
        std::env::var("DIAG_REVIVAL").map(|v| v.parse().unwrap()).unwrap_or(0.25);

    let mix = MixtureConfig::new(4, TaskFamily::GoalClustered);
    let env_cfg = EnvConfig { horizon: 100, ..EnvConfig::default() };
    let (train_tasks, test_tasks) = make_meta_split(&mix, 256, 64, 0);
    let train_trials: Vec<Trial> =
        train_tasks.iter().enumerate().map(|(i, t)| random_trial(t, &env_cfg, i as u64)).collect();
    let test_trials: Vec<Trial> = test_tasks
        .iter()
        .enumerate()
        .map(|(i, t)| random_trial(t, &env_cfg, 10_000 + i as u64))
        .collect();

    let inf_cfg: InferenceConfig = {
        let mut c = InferenceConfig::default();
        c.recon_cluster = match recon_mode.as_str() {
            "sampled" => metaclust_core::inference::ReconCluster::Sampled,
            "sampled-detached" => metaclust_core::inference::ReconCluster::SampledDetached,
            _ => metaclust_core::inference::ReconCluster::ExpectationDetached,
        };
        c
    };
    let mut rng = rng::stream(1, "diag-init", 0);
    let mut enc = TrajectoryEncoder::new(&inf_cfg, &mut rng);
    let mut prior = ClusterPrior::new(4, inf_cfg.latent_dim, inf_cfg.prior_init_std, &mut rng);
    let mut dec = Decoders::new(inf_cfg.latent_dim, inf_cfg.decoder_hidden, 0.0, &mut rng);
    let mut opt = Adam::new(inf_cfg.learning_rate);
    let opts = inf_cfg.loss_options(Relaxation::StraightThrough);

    let probe = |enc: &TrajectoryEncoder, label: &str| {
        let mut pairs = Vec::new();
        let mut code_means: Vec<Vec<f64>> = vec![vec![0.0; inf_cfg.latent_dim]; 4];
        let mut counts = [0usize; 4];
        let mut within = 0.0;
        let mut codes_by_cluster: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 4];
        for (task, trial) in test_tasks.iter().zip(test_trials.iter()) {
            let mut ps = enc.initial_posterior();
            for t in trial.steps().take(env_cfg.horizon) {
                ps = enc.encode_step(&ps, t);
            }
            let best = ps.argmax_cluster();
            pairs.push((task.cluster_id, best));
            let code = ps.z_mean.row_slice(best).to_vec();
            for (i, &v) in code.iter().enumerate() {
                code_means[task.cluster_id][i] += v;
            }
            counts[task.cluster_id] += 1;
            codes_by_cluster[task.cluster_id].push(code);
        }
        for (c, m) in code_means.iter_mut().enumerate() {
            for v in m.iter_mut() {
                *v /= counts[c].max(1) as f64;
            }
        }
        let mut between = 0.0;
        let mut nb = 0.0;
        for a in 0..4 {
            for b in (a + 1)..4 {
                between += code_means[a]
                    .iter()
                    .zip(&code_means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                nb += 1.0;
            }
        }
        for (c, codes) in codes_by_cluster.iter().enumerate() {
            for code in codes {
                within += code
                    .iter()
                    .zip(&code_means[c])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        within /= 64.0;
        between /= nb;
        println!(
            "{label}: NMI {:.3} between-code {:.2} within-code {:.2} ratio {:.2}",
            nmi(&pairs),
            between,
            within,
            between / within.max(1e-9)
        );
    };

    let t0 = std::time::Instant::now();
    for step in 0..updates {
        let mut batch_rng = rng::stream(2, "diag-batch", step as u64);
        let batch: Vec<Trial> = (0..inf_cfg.batch_size)
            .map(|_| train_trials[batch_rng.random_range(0..train_trials.len())].clone())
            .collect();
        let diag = inference_update(
            &mut enc,
            &mut prior,
            &mut dec,
            &mut opt,
            &batch,
            &opts,
            step as u64,
        )
        .unwrap();
        prior.sync_target(step as u64 + 1, inf_cfg.target_sync_interval);
        if step as u64 + 1 == inf_cfg.prior_reseed_epoch {
            let mut rrng = rng::stream(3, "diag-reseed", step as u64);
            prior.reseed_spread(&diag.codes, &mut rrng);
        } else if revival > 0.0 && (step as u64 + 1) % inf_cfg.revival_interval == 0 {
            let mut rrng = rng::stream(3, "diag-revive", step as u64);
            prior.revive_empty(&diag.cluster_usage, &diag.codes, revival, &mut rrng);
        }
        if step % 100 == 0 || step + 1 == updates {
            println!(
                "step {step:5} obj {:12.1} recon {:12.1} klz {:9.1} klc {:7.2} usage {:?} ({:.2?}/upd)",
                diag.objective,
                diag.recon_loglik,
                diag.latent_kl,
                diag.cluster_kl,
                diag.cluster_usage.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>(),
                t0.elapsed() / (step as u32 + 1)
            );
            probe(&enc, &format!("  probe@{step}"));
        }
    }
}
