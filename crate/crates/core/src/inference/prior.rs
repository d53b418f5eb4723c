//! Learnable per-cluster Gaussian priors with a slow-moving target copy.
//!
//! The prior gives each cluster its own latent location instead of the
//! single standard-normal prior of a plain VAE. A target copy, refreshed on
//! a fixed epoch schedule, anchors the consistency regularizer that keeps
//! the priors from drifting between refreshes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPrior {
    pub mean: Tensor,   // C x d_z
    pub logstd: Tensor, // C x d_z
    pub target_mean: Tensor,
    pub target_logstd: Tensor,
}

impl ClusterPrior {
    /// `init_std` spreads the initial prior means to break symmetry between
    /// clusters; log-stds start at zero.
    pub fn new(num_clusters: usize, latent_dim: usize, init_std: f64, rng: &mut impl Rng) -> Self {
        let mean = Tensor::from_fn(num_clusters, latent_dim, |_, _| {
            crate::rng::normal(rng, 0.0, init_std)
        });
        let logstd = Tensor::zeros(num_clusters, latent_dim);
        Self { target_mean: mean.clone(), target_logstd: logstd.clone(), mean, logstd }
    }

    pub fn num_clusters(&self) -> usize {
        self.mean.rows
    }

    /// Trainable parameters; the target copy is excluded on purpose.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.mean, &self.logstd]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.mean, &mut self.logstd]
    }

    pub fn inject(&self, g: &mut Graph, trainable: bool) -> PriorVars {
        let mut leaf = |t: &Tensor| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) };
        PriorVars { mean: leaf(&self.mean), logstd: leaf(&self.logstd) }
    }

    pub fn inject_target(&self, g: &mut Graph) -> PriorVars {
        PriorVars {
            mean: g.constant(self.target_mean.clone()),
            logstd: g.constant(self.target_logstd.clone()),
        }
    }

    /// Copies the prior into the target every `interval` epochs (including
    /// epoch 0, the initial sync); no-op otherwise.
    pub fn sync_target(&mut self, epoch: u64, interval: u64) {
        if interval == 0 || epoch % interval == 0 {
            self.target_mean = self.mean.clone();
            self.target_logstd = self.logstd.clone();
        }
    }

    /// Empty-component guard, the mixture-model analog of k-means
    /// empty-cluster handling: components whose batch usage falls below
    /// `threshold` times the uniform share are re-seeded onto a live task's
    /// latent posterior. Each donor is a C x d_z matrix of per-cluster
    /// posterior means; reviving cluster `c` uses the donor's row `c`, the
    /// point the donor task would occupy under that cluster. Targets are
    /// updated too, so the consistency regularizer does not fight the
    /// re-seed. Returns the revived cluster indices.
    pub fn revive_empty(
        &mut self,
        usage: &[f64],
        donor_codes: &[Tensor],
        threshold: f64,
        rng: &mut impl Rng,
    ) -> Vec<usize> {
        assert_eq!(usage.len(), self.num_clusters());
        if donor_codes.is_empty() {
            return Vec::new();
        }
        let floor = threshold / self.num_clusters() as f64;
        let mut revived = Vec::new();
        for c in 0..self.num_clusters() {
            if usage[c] >= floor {
                continue;
            }
            let donor = &donor_codes[rng.random_range(0..donor_codes.len())];
            for (d, &v) in donor.row_slice(c).iter().enumerate() {
                // small jitter so two revivals never coincide exactly
                let seeded = v + crate::rng::normal(rng, 0.0, 0.01);
                self.mean.set(c, d, seeded);
                self.target_mean.set(c, d, seeded);
                self.logstd.set(c, d, 0.0);
                self.target_logstd.set(c, d, 0.0);
            }
            revived.push(c);
        }
        revived
    }

    /// One-shot data-dependent seeding of every component: greedily picks
    /// donors that are maximally spread in latent space (k-means++ style,
    /// first donor random) and plants one prior on each. Run once, after
    /// the codes have become informative but before the assignment head
    /// commits.
    pub fn reseed_spread(&mut self, donors: &[Tensor], rng: &mut impl Rng) {
        if donors.is_empty() {
            return;
        }
        let dist = |a: &Tensor, b: &Tensor| -> f64 {
            a.row_slice(0)
                .iter()
                .zip(b.row_slice(0))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        };
        let mut chosen: Vec<usize> = vec![rng.random_range(0..donors.len())];
        while chosen.len() < self.num_clusters() && chosen.len() < donors.len() {
            let far = (0..donors.len())
                .filter(|i| !chosen.contains(i))
                .max_by(|&a, &b| {
                    let da = chosen.iter().map(|&c| dist(&donors[a], &donors[c])).fold(f64::INFINITY, f64::min);
                    let db = chosen.iter().map(|&c| dist(&donors[b], &donors[c])).fold(f64::INFINITY, f64::min);
                    da.partial_cmp(&db).unwrap()
                })
                .expect("nonempty candidate set");
            chosen.push(far);
        }
        for c in 0..self.num_clusters() {
            let donor = &donors[chosen[c % chosen.len()]];
            for (d, &v) in donor.row_slice(c).iter().enumerate() {
                let seeded = v + crate::rng::normal(rng, 0.0, 0.01);
                self.mean.set(c, d, seeded);
                self.target_mean.set(c, d, seeded);
                self.logstd.set(c, d, 0.0);
                self.target_logstd.set(c, d, 0.0);
            }
        }
    }
}

#[derive(Clone, Copy)]
pub struct PriorVars {
    pub mean: Var,
    pub logstd: Var,
}

impl PriorVars {
    pub fn all_vars(&self) -> Vec<Var> {
        vec![self.mean, self.logstd]
    }
}

/// Row-wise KL between diagonal Gaussians given mean/log-std matrices:
/// returns a `(rows x 1)` node of per-row KLs.
pub fn gauss_kl_rows(
    g: &mut Graph,
    mean_q: Var,
    logstd_q: Var,
    mean_p: Var,
    logstd_p: Var,
) -> Var {
    // per element: (lp - lq) + 0.5 exp(2(lq - lp)) + 0.5 (mq - mp)^2 exp(-2 lp) - 0.5
    let dls = g.sub(logstd_p, logstd_q);
    let two_dls = g.scale(dls, -2.0);
    let ratio = g.exp(two_dls); // exp(2(lq - lp))
    let half_ratio = g.scale(ratio, 0.5);

    let dmean = g.sub(mean_q, mean_p);
    let dmean_sq = g.square(dmean);
    let neg_two_lp = g.scale(logstd_p, -2.0);
    let inv_var_p = g.exp(neg_two_lp);
    let maha = g.mul(dmean_sq, inv_var_p);
    let half_maha = g.scale(maha, 0.5);

    let a = g.add(dls, half_ratio);
    let b = g.add(a, half_maha);
    let c = g.add_scalar(b, -0.5);
    g.sum_rows(c)
}

/// Plain closed-form KL(N(mq, e^lq) || N(mp, e^lp)) summed over dims.
pub fn gauss_kl_plain(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    mq.iter()
        .zip(lq)
        .zip(mp.iter().zip(lp))
        .map(|((&mq, &lq), (&mp, &lp))| {
            (lp - lq) + 0.5 * (2.0 * (lq - lp)).exp()
                + 0.5 * (mq - mp) * (mq - mp) * (-2.0 * lp).exp()
                - 0.5
        })
        .sum()
}

/// Mean over clusters of KL(prior || target), the prior-consistency
/// regularizer.
pub fn prior_consistency_loss(prior: &ClusterPrior) -> f64 {
    let c = prior.num_clusters();
    (0..c)
        .map(|r| {
            gauss_kl_plain(
                prior.mean.row_slice(r),
                prior.logstd.row_slice(r),
                prior.target_mean.row_slice(r),
                prior.target_logstd.row_slice(r),
            )
        })
        .sum::<f64>()
        / c as f64
}

/// Graph version of [`prior_consistency_loss`] for training.
pub fn prior_consistency_var(g: &mut Graph, prior: PriorVars, target: PriorVars) -> Var {
    let rows = gauss_kl_rows(g, prior.mean, prior.logstd, target.mean, target.logstd);
    g.mean(rows)
}
