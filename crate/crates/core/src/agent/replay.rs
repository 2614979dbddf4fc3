use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One environment interaction. `done` is the bootstrap-cut flag: true only
/// for failure terminations, not horizon ones, so values keep bootstrapping
/// across time limits.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub done: bool,
}

/// Ring storage over insertion order. Index 0 is the oldest retained item.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    storage: Vec<Transition>,
    capacity: usize,
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            head: 0,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert_count(&self) -> u64 {
        self.inserted
    }

    fn slot(&self, index: usize) -> usize {
        (self.head + index) % self.storage.len().max(1)
    }

    /// Oldest-first access.
    pub fn get(&self, index: usize) -> Option<&Transition> {
        if index >= self.storage.len() {
            return None;
        }
        Some(&self.storage[self.slot(index)])
    }

    pub fn get_mut(&mut self, index: usize) -> Option<&mut Transition> {
        if index >= self.storage.len() {
            return None;
        }
        let slot = self.slot(index);
        Some(&mut self.storage[slot])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        (0..self.len()).map(move |i| self.get(i).unwrap())
    }

    /// Uniform sample of `batch` indices (with replacement).
    pub fn sample_indices(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::contract("cannot sample from an empty replay buffer"));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.len())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    fn t(v: f32) -> Transition {
        Transition {
            state: vec![v],
            action: vec![0.0],
            reward: v,
            next_state: vec![v],
            done: false,
        }
    }

    #[test]
    fn ring_keeps_newest_and_preserves_order() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(t(i as f32));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.insert_count(), 5);
        let rewards: Vec<f32> = buf.iter().map(|x| x.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn uniform_sampling_covers_all_stored_items() {
        let mut buf = ReplayBuffer::new(16);
        for i in 0..16 {
            buf.push(t(i as f32));
        }
        let mut rng = rng_for(31, "replay");
        let mut seen = [false; 16];
        for _ in 0..100 {
            for idx in buf.sample_indices(16, &mut rng).unwrap() {
                seen[idx] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn sampling_empty_buffer_errors() {
        let buf = ReplayBuffer::new(4);
        let mut rng = rng_for(32, "replay");
        assert!(buf.sample_indices(1, &mut rng).is_err());
    }
}
