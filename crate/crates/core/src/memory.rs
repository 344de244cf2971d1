//! Replay memories over the data stream: a FIFO ring buffer (episodic
//! memory, optionally partitioned per class) and classic single-item
//! reservoir sampling, plus minibatch sampling from memory and stream.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tasks::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryScheme {
    Ring,
    Reservoir,
}

impl MemoryScheme {
    pub fn name(&self) -> &'static str {
        match self {
            MemoryScheme::Ring => "ring",
            MemoryScheme::Reservoir => "reservoir",
        }
    }
}

/// One stored stream item plus its offer sequence number (for audit and
/// sampling diagnostics).
#[derive(Debug, Clone)]
pub struct Slot {
    pub offer_id: u64,
    pub example: Example,
}

/// A bounded replay buffer over stream items. Stores copies of the offered
/// examples; `n_seen` counts every offer ever made.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    scheme: MemoryScheme,
    per_class: bool,
    slots: VecDeque<Slot>,
    n_seen: u64,
}

impl ReplayMemory {
    pub fn new(scheme: MemoryScheme, capacity: usize) -> Result<Self> {
        Self::with_options(scheme, capacity, false)
    }

    /// `per_class` switches the ring to one FIFO per seen class with the
    /// capacity split evenly across them; it is ignored for reservoir.
    pub fn with_options(scheme: MemoryScheme, capacity: usize, per_class: bool) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Usage("memory capacity must be positive".into()));
        }
        Ok(ReplayMemory {
            capacity,
            scheme,
            per_class,
            slots: VecDeque::new(),
            n_seen: 0,
        })
    }

    pub fn scheme(&self) -> MemoryScheme {
        self.scheme
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter()
    }

    /// Fraction of stored items belonging to the given task (reservoir
    /// audits how much of the current task has leaked into memory).
    pub fn task_fraction(&self, task_id: usize) -> f64 {
        if self.slots.is_empty() {
            return 0.0;
        }
        let n = self.slots.iter().filter(|s| s.example.task_id == task_id).count();
        n as f64 / self.slots.len() as f64
    }

    /// Offer one item under the memory's own scheme.
    pub fn offer<R: Rng>(&mut self, item: &Example, rng: &mut R) {
        match self.scheme {
            MemoryScheme::Ring => self.ring_offer(item),
            MemoryScheme::Reservoir => self.reservoir_offer(item, rng),
        }
    }

    /// FIFO offer: append, evicting the oldest item when over capacity.
    /// With `per_class`, capacity is split evenly across the classes seen so
    /// far and each class keeps its most recent items.
    pub fn ring_offer(&mut self, item: &Example) {
        debug_assert_eq!(self.scheme, MemoryScheme::Ring);
        let offer_id = self.n_seen;
        self.n_seen += 1;
        self.slots.push_back(Slot {
            offer_id,
            example: item.clone(),
        });
        if self.per_class {
            self.rebalance_per_class();
        } else if self.slots.len() > self.capacity {
            self.slots.pop_front();
        }
    }

    fn rebalance_per_class(&mut self) {
        let mut classes: Vec<usize> = self.slots.iter().map(|s| s.example.label).collect();
        classes.sort_unstable();
        classes.dedup();
        let cap = (self.capacity / classes.len()).max(1);
        // keep the most recent `cap` items of every class, in offer order
        let mut kept: Vec<Slot> = Vec::with_capacity(self.capacity);
        let mut counts = vec![0usize; classes.len()];
        for slot in self.slots.iter().rev() {
            let ci = classes.binary_search(&slot.example.label).unwrap();
            if counts[ci] < cap {
                counts[ci] += 1;
                kept.push(slot.clone());
            }
        }
        kept.reverse();
        while kept.len() > self.capacity {
            kept.remove(0);
        }
        self.slots = kept.into();
    }

    /// Reservoir offer: the first `m` items are stored; afterwards the item
    /// replaces a uniformly chosen slot with probability `m / (n_seen + 1)`
    /// and is discarded otherwise.
    pub fn reservoir_offer<R: Rng>(&mut self, item: &Example, rng: &mut R) {
        debug_assert_eq!(self.scheme, MemoryScheme::Reservoir);
        let offer_id = self.n_seen;
        self.n_seen += 1;
        if self.slots.len() < self.capacity {
            self.slots.push_back(Slot {
                offer_id,
                example: item.clone(),
            });
            return;
        }
        let p = self.capacity as f64 / self.n_seen as f64;
        if rng.gen::<f64>() < p {
            let victim = rng.gen_range(0..self.slots.len());
            self.slots[victim] = Slot {
                offer_id,
                example: item.clone(),
            };
        }
    }

    /// Uniform minibatch from memory: without replacement when the batch fits,
    /// with replacement otherwise. Returns the no-replay signal when empty.
    pub fn sample_batch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Minibatch> {
        if self.slots.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if batch_size == 0 {
            return Err(Error::EmptyBatch("sample_batch"));
        }
        let n = self.slots.len();
        let picks: Vec<usize> = if batch_size <= n {
            // partial Fisher-Yates over slot indices
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..batch_size {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            idx.truncate(batch_size);
            idx
        } else {
            (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut examples = Vec::with_capacity(batch_size);
        let mut indices = Vec::with_capacity(batch_size);
        for i in picks {
            examples.push(self.slots[i].example.clone());
            indices.push(self.slots[i].offer_id);
        }
        Ok(Minibatch { examples, indices })
    }

    /// CSV snapshot for audit: one row per slot.
    pub fn snapshot_csv(&self) -> String {
        let dim = self
            .slots
            .front()
            .map(|s| s.example.features.len())
            .unwrap_or(0);
        let mut out = String::from("slot,offer_id,task_id,label");
        for j in 0..dim {
            out.push_str(&format!(",feature_{j}"));
        }
        out.push('\n');
        for (i, slot) in self.slots.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{}",
                slot.offer_id, slot.example.task_id, slot.example.label
            ));
            for v in &slot.example.features {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// A sampled minibatch together with the source identities of its items
/// (offer ids for memory batches, stream positions for stream batches).
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub examples: Vec<Example>,
    pub indices: Vec<u64>,
}

/// Single-pass cursor over the current task's examples; batches are the next
/// contiguous chunk of the stream.
#[derive(Debug)]
pub struct StreamCursor<'a> {
    examples: &'a [Example],
    pos: usize,
}

impl<'a> StreamCursor<'a> {
    pub fn new(examples: &'a [Example]) -> Self {
        StreamCursor { examples, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.examples.len() - self.pos
    }

    /// Next contiguous chunk, shorter at the stream tail; `None` once the
    /// task is exhausted.
    pub fn next_batch(&mut self, batch_size: usize) -> Option<Minibatch> {
        if self.pos >= self.examples.len() || batch_size == 0 {
            return None;
        }
        let end = (self.pos + batch_size).min(self.examples.len());
        let examples = self.examples[self.pos..end].to_vec();
        let indices = (self.pos..end).map(|i| i as u64).collect();
        self.pos = end;
        Some(Minibatch { examples, indices })
    }
}
