//! Replacement policies for the bounded cache tiers.
//!
//! A policy only tracks ordering; the owning tier holds the payloads and asks
//! for a victim whenever it is over capacity.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::VectorId;

pub trait EvictionPolicy: Send {
    /// `id` was just inserted into the tier.
    fn inserted(&mut self, id: VectorId);
    /// `id` was read while resident.
    fn accessed(&mut self, id: VectorId);
    /// `id` left the tier for a reason other than eviction (e.g. promotion).
    fn removed(&mut self, id: VectorId);
    /// Picks and forgets the next id to evict.
    fn victim(&mut self) -> Option<VectorId>;
    fn clear(&mut self);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionKind {
    #[default]
    Fifo,
    Lru,
}

impl EvictionKind {
    pub fn build(self) -> Box<dyn EvictionPolicy> {
        match self {
            EvictionKind::Fifo => Box::new(Fifo::default()),
            EvictionKind::Lru => Box::new(Lru::default()),
        }
    }
}

/// Queue of `(id, sequence)` entries with lazy deletion: an entry is live only
/// while `live[id]` still carries its sequence number.
#[derive(Default)]
struct SeqQueue {
    queue: VecDeque<(VectorId, u64)>,
    live: HashMap<VectorId, u64>,
    next_seq: u64,
}

impl SeqQueue {
    fn push(&mut self, id: VectorId) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.live.insert(id, seq);
        self.queue.push_back((id, seq));
        if self.queue.len() > 2 * self.live.len() + 32 {
            let live = &self.live;
            self.queue.retain(|(id, seq)| live.get(id) == Some(seq));
        }
    }

    fn remove(&mut self, id: VectorId) {
        self.live.remove(&id);
    }

    fn pop(&mut self) -> Option<VectorId> {
        while let Some((id, seq)) = self.queue.pop_front() {
            if self.live.get(&id) == Some(&seq) {
                self.live.remove(&id);
                return Some(id);
            }
        }
        None
    }

    fn clear(&mut self) {
        self.queue.clear();
        self.live.clear();
    }
}

/// First-in first-out: reads do not change eviction order.
#[derive(Default)]
pub struct Fifo(SeqQueue);

impl EvictionPolicy for Fifo {
    fn inserted(&mut self, id: VectorId) {
        self.0.push(id);
    }

    fn accessed(&mut self, _id: VectorId) {}

    fn removed(&mut self, id: VectorId) {
        self.0.remove(id);
    }

    fn victim(&mut self) -> Option<VectorId> {
        self.0.pop()
    }

    fn clear(&mut self) {
        self.0.clear();
    }
}

/// Least-recently-used.
#[derive(Default)]
pub struct Lru(SeqQueue);

impl EvictionPolicy for Lru {
    fn inserted(&mut self, id: VectorId) {
        self.0.push(id);
    }

    fn accessed(&mut self, id: VectorId) {
        self.0.push(id);
    }

    fn removed(&mut self, id: VectorId) {
        self.0.remove(id);
    }

    fn victim(&mut self) -> Option<VectorId> {
        self.0.pop()
    }

    fn clear(&mut self) {
        self.0.clear();
    }
}
