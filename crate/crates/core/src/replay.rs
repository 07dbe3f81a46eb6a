//! Bounded prioritized replay: FIFO ring storage, sampling proportional to
//! `(p_i + ε_p)^α` via a sum tree.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

pub const DEFAULT_ALPHA: f64 = 0.6;
pub const PRIORITY_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("replay buffer is empty")]
    BufferEmpty,
    #[error("index {0} is not a stored slot")]
    BadIndex(usize),
    #[error("priority must be finite and non-negative, got {0}")]
    BadPriority(f64),
}

/// Complete binary tree over `capacity` leaves combining children with `op`.
#[derive(Debug, Clone)]
struct SegmentTree {
    size: usize,
    nodes: Vec<f64>,
    neutral: f64,
    op: fn(f64, f64) -> f64,
}

impl SegmentTree {
    fn new(capacity: usize, neutral: f64, op: fn(f64, f64) -> f64) -> Self {
        let size = capacity.next_power_of_two();
        Self {
            size,
            nodes: vec![neutral; 2 * size],
            neutral,
            op,
        }
    }

    fn set(&mut self, i: usize, v: f64) {
        let mut k = i + self.size;
        self.nodes[k] = v;
        while k > 1 {
            k /= 2;
            self.nodes[k] = (self.op)(self.nodes[2 * k], self.nodes[2 * k + 1]);
        }
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[i + self.size]
    }

    fn root(&self) -> f64 {
        self.nodes[1]
    }

    fn clear(&mut self) {
        self.nodes.iter_mut().for_each(|n| *n = self.neutral);
    }

    /// Smallest leaf `i` with prefix sum through `i` exceeding `mass`
    /// (sum trees only).
    fn find_prefix(&self, mut mass: f64) -> usize {
        let mut k = 1;
        while k < self.size {
            let left = self.nodes[2 * k];
            if mass < left {
                k *= 2;
            } else {
                mass -= left;
                k = 2 * k + 1;
            }
        }
        k - self.size
    }
}

/// One prioritized draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledSlot {
    /// Ring slot, valid for `update_priorities` until overwritten.
    pub index: usize,
    /// Global insertion counter of the item in that slot.
    pub insertion_id: u64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    alpha: f64,
    items: Vec<T>,
    ids: Vec<u64>,
    priorities: Vec<f64>,
    next: usize,
    inserted: u64,
    sum: SegmentTree,
    max: SegmentTree,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self::with_alpha(capacity, DEFAULT_ALPHA)
    }

    pub fn with_alpha(capacity: usize, alpha: f64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        assert!(alpha >= 0.0 && alpha.is_finite(), "alpha must be non-negative");
        Self {
            capacity,
            alpha,
            items: Vec::with_capacity(capacity),
            ids: Vec::with_capacity(capacity),
            priorities: Vec::with_capacity(capacity),
            next: 0,
            inserted: 0,
            sum: SegmentTree::new(capacity, 0.0, |a, b| a + b),
            max: SegmentTree::new(capacity, 0.0, f64::max),
        }
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

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Total number of items ever added.
    pub fn insertions(&self) -> u64 {
        self.inserted
    }

    /// Largest stored priority, or 1.0 when empty.
    pub fn max_priority(&self) -> f64 {
        if self.is_empty() {
            1.0
        } else {
            self.max.root()
        }
    }

    fn weight(&self, p: f64) -> f64 {
        libm::pow(p + PRIORITY_EPSILON, self.alpha)
    }

    fn write_priority(&mut self, slot: usize, p: f64) {
        if slot < self.priorities.len() {
            self.priorities[slot] = p;
        } else {
            self.priorities.push(p);
        }
        let w = self.weight(p);
        self.sum.set(slot, w);
        self.max.set(slot, p);
    }

    /// Adds `item` at the current max priority, evicting the oldest item when
    /// full. Returns the slot it occupies.
    pub fn add(&mut self, item: T) -> usize {
        let p = self.max_priority();
        self.add_with_priority(item, p)
    }

    pub fn add_with_priority(&mut self, item: T, priority: f64) -> usize {
        let slot = self.next;
        if slot < self.items.len() {
            self.items[slot] = item;
            self.ids[slot] = self.inserted;
        } else {
            self.items.push(item);
            self.ids.push(self.inserted);
        }
        self.write_priority(slot, priority.max(0.0));
        self.inserted += 1;
        self.next = (self.next + 1) % self.capacity;
        slot
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.items.get(index)
    }

    pub fn priority(&self, index: usize) -> Option<f64> {
        self.priorities.get(index).copied()
    }

    pub fn insertion_id(&self, index: usize) -> Option<u64> {
        self.ids.get(index).copied()
    }

    /// Items in insertion order, oldest first.
    pub fn iter_fifo(&self) -> impl Iterator<Item = &T> {
        let start = if self.items.len() < self.capacity { 0 } else { self.next };
        let n = self.items.len();
        (0..n).map(move |k| &self.items[(start + k) % n])
    }

    /// Sampling probability of every stored slot.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.sum.root();
        (0..self.len()).map(|i| self.sum.get(i) / total).collect()
    }

    /// `count` independent draws with replacement, each slot chosen with
    /// probability `(p_i + ε_p)^α / Σ_j (p_j + ε_p)^α`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<SampledSlot>, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::BufferEmpty);
        }
        let total = self.sum.root();
        Ok((0..count)
            .map(|_| {
                let mass = rng.random::<f64>() * total;
                // guard against rounding past the last populated leaf
                let index = self.sum.find_prefix(mass).min(self.len() - 1);
                SampledSlot {
                    index,
                    insertion_id: self.ids[index],
                }
            })
            .collect())
    }

    /// Overwrites priorities of previously sampled slots. Callers typically
    /// pass `|td_error|`.
    pub fn update_priorities(&mut self, indices: &[usize], priorities: &[f64]) -> Result<(), ReplayError> {
        for (&i, &p) in indices.iter().zip(priorities) {
            if i >= self.len() {
                return Err(ReplayError::BadIndex(i));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(ReplayError::BadPriority(p));
            }
            self.write_priority(i, p);
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.ids.clear();
        self.priorities.clear();
        self.sum.clear();
        self.max.clear();
        self.next = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn fifo_eviction_keeps_last_capacity_items() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.add(i);
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.iter_fifo().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(b.insertions(), 5);
    }

    #[test]
    fn new_items_get_max_priority() {
        let mut b = ReplayBuffer::new(4);
        assert_eq!(b.max_priority(), 1.0);
        let s = b.add("a");
        assert_eq!(b.priority(s), Some(1.0));
        b.update_priorities(&[s], &[3.5]).unwrap();
        let t = b.add("b");
        assert_eq!(b.priority(t), Some(3.5));
    }

    #[test]
    fn empty_sample_errors() {
        let b: ReplayBuffer<u8> = ReplayBuffer::new(2);
        assert_eq!(b.sample(1, &mut seeded(0)), Err(ReplayError::BufferEmpty));
    }

    #[test]
    fn zero_priority_slot_rarely_drawn() {
        let mut b = ReplayBuffer::with_alpha(2, 1.0);
        b.add_with_priority(0, 0.0);
        b.add_with_priority(1, 10.0);
        let draws = b.sample(1000, &mut seeded(1)).unwrap();
        assert!(draws.iter().all(|d| d.index == 1));
    }

    #[test]
    fn rejects_bad_updates() {
        let mut b = ReplayBuffer::new(2);
        b.add(0);
        assert_eq!(b.update_priorities(&[1], &[1.0]), Err(ReplayError::BadIndex(1)));
        assert!(b.update_priorities(&[0], &[f64::NAN]).is_err());
    }
}
