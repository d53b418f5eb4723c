//! Interaction records: single transitions, episodes, and whole trials.

use serde::{Deserialize, Serialize};

/// One environment interaction `(s, a, r, s')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: [f64; 2],
    pub action: [f64; 2],
    pub reward: f64,
    pub next_state: [f64; 2],
}

/// One episode of fixed length.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted return.
    pub fn ret(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// All episodes collected in one task: the exploration episode followed by
/// the exploitation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub task_id: u64,
    pub cluster_id: usize,
    pub episodes: Vec<Trajectory>,
}

impl Trial {
    /// Total number of transitions across episodes.
    pub fn total_len(&self) -> usize {
        self.episodes.iter().map(Trajectory::len).sum()
    }

    /// Iterate transitions across all episodes in order.
    pub fn steps(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }
}
