//! Bounded storage of completed trials for inference training.
//!
//! A FIFO ring over [`TrialRecord`]s with uniform with-replacement batch
//! sampling. The training loop is the single writer; batch sampling takes
//! cloned snapshots.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::trajectory::Trial;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: Trial,
    /// Inference-training epoch at insertion time.
    pub insert_epoch: u64,
}

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("trial has {got} transitions, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("buffer io: {0}")]
    Io(#[from] std::io::Error),
    #[error("buffer decode: {0}")]
    Decode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialBuffer {
    capacity: usize,
    /// Transitions every record must contain: (N + 1) * H.
    expected_len: usize,
    records: VecDeque<TrialRecord>,
}

impl TrialBuffer {
    pub fn new(capacity: usize, expected_len: usize) -> Self {
        assert!(capacity > 0);
        Self { capacity, expected_len, records: VecDeque::with_capacity(capacity.min(4096)) }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, record: TrialRecord) -> Result<(), BufferError> {
        let got = record.trial.total_len();
        if got != self.expected_len {
            return Err(BufferError::WrongLength { expected: self.expected_len, got });
        }
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        Ok(())
    }

    /// `n` uniform draws with replacement, deterministic in `seed`.
    pub fn sample_batch(&self, n: usize, seed: u64) -> Result<Vec<TrialRecord>, BufferError> {
        if self.records.is_empty() {
            return Err(BufferError::Empty);
        }
        let mut rng = rng::stream(seed, "buffer-sample", 0);
        Ok((0..n)
            .map(|_| self.records[rng.random_range(0..self.records.len())].clone())
            .collect())
    }

    pub fn contains_task(&self, task_id: u64) -> bool {
        self.records.iter().any(|r| r.trial.task_id == task_id)
    }

    /// Spill the buffer to disk for run resumption.
    pub fn save(&self, path: &Path) -> Result<(), BufferError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BufferError> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Trajectory, Transition};

    fn record(task_id: u64, len: usize) -> TrialRecord {
        let t = Transition {
            state: [0.0, 0.0],
            action: [0.0, 0.0],
            reward: task_id as f64,
            next_state: [0.0, 0.0],
        };
        TrialRecord {
            trial: Trial {
                task_id,
                cluster_id: 0,
                episodes: vec![Trajectory { transitions: vec![t; len] }],
            },
            insert_epoch: 0,
        }
    }

    #[test]
    fn insert_grows_until_capacity_then_evicts_fifo() {
        let mut buf = TrialBuffer::new(3, 4);
        buf.insert(record(0, 4)).unwrap();
        assert_eq!(buf.len(), 1);
        for i in 1..=3 {
            buf.insert(record(i, 4)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        assert!(!buf.contains_task(0), "oldest record must be evicted");
        // evicted record is no longer sampleable
        for r in buf.sample_batch(100, 7).unwrap() {
            assert_ne!(r.trial.task_id, 0);
        }
    }

    #[test]
    fn malformed_record_is_rejected() {
        let mut buf = TrialBuffer::new(3, 4);
        assert!(matches!(
            buf.insert(record(0, 5)),
            Err(BufferError::WrongLength { expected: 4, got: 5 })
        ));
    }

    #[test]
    fn sampling_single_record_buffer_returns_it() {
        let mut buf = TrialBuffer::new(3, 4);
        buf.insert(record(9, 4)).unwrap();
        let batch = buf.sample_batch(1, 0).unwrap();
        assert_eq!(batch[0].trial.task_id, 9);
    }

    #[test]
    fn sampling_empty_buffer_fails() {
        let buf = TrialBuffer::new(3, 4);
        assert!(matches!(buf.sample_batch(1, 0), Err(BufferError::Empty)));
    }

    #[test]
    fn sampling_is_uniform_and_seed_deterministic() {
        let mut buf = TrialBuffer::new(2, 4);
        buf.insert(record(0, 4)).unwrap();
        buf.insert(record(1, 4)).unwrap();
        let n = 100_000;
        let batch = buf.sample_batch(n, 42).unwrap();
        let ones = batch.iter().filter(|r| r.trial.task_id == 1).count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
        let again = buf.sample_batch(n, 42).unwrap();
        assert_eq!(batch, again);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.json");
        let mut buf = TrialBuffer::new(4, 4);
        buf.insert(record(1, 4)).unwrap();
        buf.insert(record(2, 4)).unwrap();
        buf.save(&path).unwrap();
        let loaded = TrialBuffer::load(&path).unwrap();
        assert_eq!(buf.len(), loaded.len());
        assert_eq!(
            buf.sample_batch(5, 3).unwrap(),
            loaded.sample_batch(5, 3).unwrap()
        );
    }
}
