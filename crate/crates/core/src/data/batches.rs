//! Seeded, restartable minibatch order.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::{RngState, SeededRng};

/// Everything needed to resume a [`BatchIter`] mid-epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchState {
    pub len: usize,
    pub batch: usize,
    pub epoch: u64,
    pub cursor: usize,
    /// RNG position at the start of the current epoch's shuffle.
    pub epoch_rng: RngState,
}

/// Full reshuffle each epoch; the final batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchIter {
    state: BatchState,
    rng: SeededRng,
    perm: Vec<usize>,
}

impl BatchIter {
    pub fn new(len: usize, batch: usize, rng: SeededRng) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(Error::Config(format!("batch size {batch} for a dataset of {len}")));
        }
        let state = BatchState {
            len,
            batch,
            epoch: 0,
            cursor: 0,
            epoch_rng: rng.state(),
        };
        Ok(Self::from_state(state))
    }

    pub fn from_state(state: BatchState) -> Self {
        let mut rng = SeededRng::from_state(state.epoch_rng);
        let mut perm: Vec<usize> = (0..state.len).collect();
        perm.shuffle(&mut rng);
        Self { state, rng, perm }
    }

    pub fn state(&self) -> BatchState {
        self.state
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.state.cursor >= self.state.len {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.state.epoch_rng = self.rng.state();
            self.perm = (0..self.state.len).collect();
            self.perm.shuffle(&mut self.rng);
        }
        let end = (self.state.cursor + self.state.batch).min(self.state.len);
        let out = self.perm[self.state.cursor..end].to_vec();
        self.state.cursor = end;
        out
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_indices())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Stream;

    #[test]
    fn epoch_covers_dataset_once() {
        let mut it = BatchIter::new(10, 4, SeededRng::new(1, Stream::Data)).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| it.next_indices()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(it.next_indices().len(), 4);
        assert_eq!(it.state().epoch, 1);
    }

    #[test]
    fn same_seed_same_order_and_resume() {
        let a: Vec<Vec<usize>> = BatchIter::new(9, 2, SeededRng::new(5, Stream::Data)).unwrap().take(12).collect();
        let b: Vec<Vec<usize>> = BatchIter::new(9, 2, SeededRng::new(5, Stream::Data)).unwrap().take(12).collect();
        assert_eq!(a, b);
        let mut it = BatchIter::new(9, 2, SeededRng::new(5, Stream::Data)).unwrap();
        for _ in 0..7 {
            it.next_indices();
        }
        let resumed: Vec<Vec<usize>> = BatchIter::from_state(it.state()).take(5).collect();
        assert_eq!(resumed, a[7..12].to_vec());
        assert_ne!(a[0..5], a[5..10]);
    }

    #[test]
    fn oversized_batch_is_an_error() {
        assert!(BatchIter::new(3, 4, SeededRng::new(0, Stream::Data)).is_err());
    }
}
