//! Transitions with their routing paths, stored in one ring per task.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::routing::RoutingMask;

/// Routing paths of the actor and both critics for one state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredMasks {
    pub actor: RoutingMask,
    pub q1: RoutingMask,
    pub q2: RoutingMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True only for terminal states; horizon cut-offs still bootstrap.
    pub done: bool,
    pub task: usize,
    /// Paths the behaviour networks took at `state`.
    pub masks: StoredMasks,
    /// Paths the behaviour networks took at `next_state`.
    pub next_masks: StoredMasks,
}

#[derive(Clone, Debug)]
struct Ring {
    items: Vec<Transition>,
    next: usize,
    capacity: usize,
}

impl Ring {
    fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }
}

/// Fixed-capacity replay split evenly across tasks; each task's ring
/// overwrites its oldest entry first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    rings: Vec<Ring>,
}

impl ReplayBuffer {
    /// `capacity` is the total over all tasks.
    pub fn new(n_tasks: usize, capacity: usize) -> Self {
        assert!(n_tasks > 0, "replay needs at least one task");
        let per_task = (capacity / n_tasks).max(1);
        Self {
            rings: (0..n_tasks)
                .map(|_| Ring {
                    items: Vec::with_capacity(per_task.min(1 << 16)),
                    next: 0,
                    capacity: per_task,
                })
                .collect(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.rings.len()
    }

    pub fn len(&self) -> usize {
        self.rings.iter().map(|r| r.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_len(&self, task: usize) -> usize {
        self.rings[task].items.len()
    }

    pub fn capacity_per_task(&self) -> usize {
        self.rings[0].capacity
    }

    pub fn push(&mut self, t: Transition) {
        let task = t.task;
        self.rings[task].push(t);
    }

    /// Whether every task holds at least `per_task` transitions.
    pub fn can_sample(&self, per_task: usize) -> bool {
        self.rings.iter().all(|r| r.items.len() >= per_task)
    }

    /// `per_task` distinct transitions from every task, grouped by task in
    /// ascending order. `None` if some task holds too few.
    pub fn sample<R: Rng + ?Sized>(&self, per_task: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        if !self.can_sample(per_task) {
            return None;
        }
        let mut out = Vec::with_capacity(per_task * self.rings.len());
        for ring in &self.rings {
            for i in index::sample(rng, ring.items.len(), per_task) {
                out.push(&ring.items[i]);
            }
        }
        Some(out)
    }
}
