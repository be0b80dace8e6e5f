use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::heads::Batch;
use crate::ndcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True failure; truncation at the episode cap is not terminal.
    pub terminal: bool,
}

/// Fixed-capacity ring buffer with oldest-first eviction.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            next: 0,
            inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    /// Contents from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, batch_size: usize, rng: &mut dyn RngCore) -> Batch {
        assert!(!self.items.is_empty(), "sampling from an empty buffer");
        let picks: Vec<&Transition> = (0..batch_size)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect();
        batch_of(&picks)
    }

    /// All stored states as an `[n, obs_dim]` matrix.
    pub fn states(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.items.iter().map(|t| t.state.clone()).collect();
        Tensor::from_rows(&rows).expect("states share one dimension")
    }
}

pub fn batch_of(picks: &[&Transition]) -> Batch {
    let rows = |f: fn(&Transition) -> &Vec<f64>| {
        Tensor::from_rows(&picks.iter().map(|t| f(t).clone()).collect::<Vec<_>>()).expect("rectangular batch")
    };
    Batch {
        states: rows(|t| &t.state),
        actions: picks.iter().map(|t| t.action).collect(),
        rewards: picks.iter().map(|t| t.reward).collect(),
        next_states: rows(|t| &t.next_state),
        terminals: picks.iter().map(|t| t.terminal).collect(),
    }
}
