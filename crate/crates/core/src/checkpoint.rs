//! Versioned checkpoints holding every learnable parameter plus optimizer
//! state and progress counters, so runs resume exactly where they stopped.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{ClusterPrior, Decoders, TrajectoryEncoder};
use crate::nn::Adam;
use crate::policy::GaussianPolicy;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub iteration: u64,
    pub frames: u64,
    /// Inference-training epoch (one per inference update).
    pub inference_epoch: u64,
    pub encoder: TrajectoryEncoder,
    pub prior: ClusterPrior,
    pub decoders: Decoders,
    pub explore_policy: GaussianPolicy,
    pub exploit_policy: GaussianPolicy,
    pub inference_opt: Adam,
    pub explore_opt: Adam,
    pub exploit_opt: Adam,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint decode: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {got} (expected {expected})")]
    Version { got: u32, expected: u32 },
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        let cp: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                got: cp.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(cp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::InferenceConfig;
    use crate::policy::PolicyConfig;
    use crate::rng::stream;

    fn tiny_checkpoint() -> Checkpoint {
        let cfg = InferenceConfig {
            embed_dim: 4,
            cluster_rnn_hidden: 5,
            task_rnn_hidden: 5,
            latent_dim: 2,
            decoder_hidden: 4,
            ..InferenceConfig::default()
        };
        let mut r = stream(0, "ckpt-test", 0);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            fingerprint: "0123456789abcdef".into(),
            iteration: 42,
            frames: 67_200,
            inference_epoch: 42,
            encoder: TrajectoryEncoder::new(&cfg, &mut r),
            prior: ClusterPrior::new(4, 2, 0.1, &mut r),
            decoders: Decoders::new(2, 4, 0.0, &mut r),
            explore_policy: GaussianPolicy::new(10, &PolicyConfig { hidden: 8 }, &mut r),
            exploit_policy: GaussianPolicy::new(10, &PolicyConfig { hidden: 8 }, &mut r),
            inference_opt: Adam::new(1e-3),
            explore_opt: Adam::new(1e-4),
            exploit_opt: Adam::new(1e-4),
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let cp = tiny_checkpoint();
        cp.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(cp.iteration, loaded.iteration);
        assert_eq!(cp.fingerprint, loaded.fingerprint);
        for (a, b) in cp.encoder.tensors().iter().zip(loaded.encoder.tensors().iter()) {
            assert_eq!(a.data, b.data, "parameters must survive the round trip exactly");
        }
        for (a, b) in cp.prior.tensors().iter().zip(loaded.prior.tensors().iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut cp = tiny_checkpoint();
        cp.version = 99;
        cp.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Version { got: 99, .. })
        ));
    }
}
