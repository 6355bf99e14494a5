use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClickSequence, SequencePair};
use crate::error::{Error, Result};

/// Seeded mini-batch iterator over any record slice.
pub struct BatchIterator<'a, T> {
    items: &'a [T],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    drop_incomplete: bool,
}

impl<'a, T> BatchIterator<'a, T> {
    pub fn new(items: &'a [T], batch_size: usize, seed: u64, drop_incomplete: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if drop_incomplete && batch_size > items.len() {
            return Err(Error::EmptyDataset(format!(
                "batch size {batch_size} exceeds dataset of {} with incomplete batches dropped",
                items.len()
            )));
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            items,
            order,
            batch_size,
            pos: 0,
            drop_incomplete,
        })
    }

    /// Batches in file order, no shuffling.
    pub fn sequential(items: &'a [T], batch_size: usize) -> Result<Self> {
        let mut it = Self::new(items, batch_size, 0, false)?;
        it.order = (0..items.len()).collect();
        Ok(it)
    }
}

impl<'a, T> Iterator for BatchIterator<'a, T> {
    type Item = Vec<&'a T>;

    fn next(&mut self) -> Option<Self::Item> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_incomplete && remaining < self.batch_size) {
            return None;
        }
        let end = self.pos + remaining.min(self.batch_size);
        let batch = self.order[self.pos..end].iter().map(|&i| &self.items[i]).collect();
        self.pos = end;
        Some(batch)
    }
}

/// Index-aligned source/target views of a batch: position `i` of both lists
/// belongs to the same user.
pub struct PairBatch<'a> {
    pub users: Vec<&'a str>,
    pub source: Vec<&'a ClickSequence>,
    pub target: Vec<&'a ClickSequence>,
}

impl<'a> PairBatch<'a> {
    pub fn new(pairs: &[&'a SequencePair]) -> Self {
        Self {
            users: pairs.iter().map(|p| p.user_id.as_str()).collect(),
            source: pairs.iter().map(|p| &p.source).collect(),
            target: pairs.iter().map(|p| &p.target).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}
