use rand::seq::index;
use rand::Rng;

use crate::error::{LilacError, Result};

/// Fixed-capacity reservoir: after `n ≥ capacity` insertions every inserted
/// item is retained with probability `capacity / n`.
#[derive(Clone, Debug)]
pub struct ReservoirBuffer<I> {
    capacity: usize,
    items: Vec<I>,
    seen: u64,
}

impl<I> ReservoirBuffer<I> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
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

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[I] {
        &self.items
    }

    pub fn insert(&mut self, item: I, rng: &mut impl Rng) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
            return;
        }
        let j = rng.random_range(0..self.seen);
        if (j as usize) < self.capacity {
            self.items[j as usize] = item;
        }
    }

    /// `n` distinct stored items, uniformly.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&I>> {
        if n > self.items.len() {
            return Err(LilacError::State(format!(
                "cannot sample {n} items from a buffer of {}",
                self.items.len()
            )));
        }
        Ok(index::sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn fills_then_rejects_oversampling() {
        let mut rng = SeedTree::new(0).rng();
        let mut b = ReservoirBuffer::new(5);
        for i in 0..5 {
            b.insert(i, &mut rng);
        }
        assert_eq!(b.items(), &[0, 1, 2, 3, 4]);
        assert!(b.sample(6, &mut rng).is_err());
        let s = b.sample(5, &mut rng).unwrap();
        let mut s: Vec<i32> = s.into_iter().copied().collect();
        s.sort();
        assert_eq!(s, [0, 1, 2, 3, 4]);
    }
}
