//! Proportional prioritized replay over a ring buffer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Added to |TD error| when refreshing a priority.
    pub priority_epsilon: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            priority_epsilon: 1e-6,
        }
    }
}

impl ReplayConfig {
    /// Importance-sampling exponent at `progress` in [0, 1] of training.
    pub fn beta(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.beta_start + (self.beta_end - self.beta_start) * p
    }
}

/// Binary sum tree over `p^alpha`; leaves start at `base`.
#[derive(Clone, Debug)]
struct SumTree {
    base: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let base = capacity.next_power_of_two();
        SumTree {
            base,
            nodes: vec![0.0; 2 * base],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[self.base + i]
    }

    fn set(&mut self, i: usize, v: f64) {
        let mut n = self.base + i;
        self.nodes[n] = v;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass`.
    fn find(&self, mut mass: f64, len: usize) -> usize {
        let mut n = 1;
        while n < self.base {
            let left = self.nodes[2 * n];
            if mass < left {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        // Rounding can walk past the last filled leaf.
        (n - self.base).min(len - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub indices: Vec<usize>,
    /// `(N * P(i))^-beta` divided by the batch maximum.
    pub weights: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PrioritizedReplay<T> {
    cfg: ReplayConfig,
    capacity: usize,
    items: Vec<T>,
    priorities: Vec<f64>,
    next: usize,
    max_priority: f64,
    tree: SumTree,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(capacity: usize, cfg: ReplayConfig) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        if !(cfg.alpha >= 0.0) || !(cfg.priority_epsilon > 0.0) {
            return Err(Error::config("replay: alpha >= 0 and priority_epsilon > 0 required"));
        }
        Ok(PrioritizedReplay {
            cfg,
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            priorities: Vec::with_capacity(capacity.min(4096)),
            next: 0,
            max_priority: 1.0,
            tree: SumTree::new(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.cfg
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.priorities[i]
    }

    /// Stores `item` at the current maximum priority, evicting the oldest
    /// item once full. Returns the slot used.
    pub fn push(&mut self, item: T) -> usize {
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(item);
            self.priorities.push(self.max_priority);
        } else {
            self.items[slot] = item;
            self.priorities[slot] = self.max_priority;
        }
        self.tree.set(slot, self.max_priority.powf(self.cfg.alpha));
        self.next = (slot + 1) % self.capacity;
        slot
    }

    /// Sampling probability of slot `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    /// Draws `batch` slots with replacement, each with probability
    /// proportional to `p^alpha`.
    pub fn sample(&self, batch: usize, beta: f64, rng: &mut Rng) -> Result<Sample> {
        if batch == 0 || self.len() < batch {
            return Err(Error::InvalidAction(format!(
                "cannot sample {batch} items from a replay buffer holding {}",
                self.len()
            )));
        }
        let total = self.tree.total();
        let n = self.len() as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut probabilities = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = self.tree.find(rng.gen::<f64>() * total, self.len());
            let p = self.probability(i);
            indices.push(i);
            probabilities.push(p);
            weights.push((n * p).powf(-beta));
        }
        let max_w = weights.iter().cloned().fold(0.0, f64::max);
        weights.iter_mut().for_each(|w| *w /= max_w);
        Ok(Sample {
            indices,
            weights,
            probabilities,
        })
    }

    /// Sets slot `i` to priority `|td| + priority_epsilon`.
    pub fn update_priority(&mut self, i: usize, td: f64) {
        let p = td.abs() + self.cfg.priority_epsilon;
        if !p.is_finite() {
            return;
        }
        self.priorities[i] = p;
        self.max_priority = self.max_priority.max(p);
        self.tree.set(i, p.powf(self.cfg.alpha));
    }
}
