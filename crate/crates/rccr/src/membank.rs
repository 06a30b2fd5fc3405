//! FIFO memory bank of categorized negative embeddings from recent batches.
//!
//! The bank retains one slab per pushed batch, evicting the oldest slab once
//! more than `depth` are held. Stored embeddings are detached copies: nothing
//! in the training loop can mutate them after the push, and they never carry
//! gradients.

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

use crate::contrastive::BankNegatives;
use crate::core::RngHandle;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("push stamp {new} not greater than previous stamp {last}")]
    NonMonotonicStamp { new: u64, last: u64 },
}

/// One stored negative: a detached embedding with its label or pseudo-label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub embedding: Array1<f64>,
    pub category: u8,
    pub stamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Slab {
    stamp: u64,
    entries: Vec<BankEntry>,
}

/// Ring buffer of per-batch slabs. `depth` bounds the number of retained
/// batches and `capacity` the entries kept per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    slabs: VecDeque<Slab>,
    depth: usize,
    capacity: usize,
    last_stamp: Option<u64>,
}

impl MemoryBank {
    pub fn new(depth: usize, capacity: usize) -> Self {
        Self {
            slabs: VecDeque::with_capacity(depth + 1),
            depth,
            capacity,
            last_stamp: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total retained entries across all slabs.
    pub fn len(&self) -> usize {
        self.slabs.iter().map(|s| s.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stamps of the retained slabs, oldest first.
    pub fn stamps(&self) -> Vec<u64> {
        self.slabs.iter().map(|s| s.stamp).collect()
    }

    /// Appends one batch of entries as a new slab, evicting the oldest slab
    /// beyond `depth`. Entries beyond `capacity` are dropped by a uniform
    /// subsample. Stamps must be strictly increasing across pushes.
    pub fn push_batch(
        &mut self,
        mut entries: Vec<BankEntry>,
        stamp: u64,
        rng: &RngHandle,
    ) -> Result<(), BankError> {
        if let Some(last) = self.last_stamp {
            if stamp <= last {
                return Err(BankError::NonMonotonicStamp { new: stamp, last });
            }
        }
        self.last_stamp = Some(stamp);
        if self.depth == 0 {
            return Ok(());
        }
        if entries.len() > self.capacity {
            let mut keep: Vec<usize> = (0..entries.len())
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng.rng(), self.capacity)
                .copied()
                .collect();
            keep.sort_unstable();
            entries = keep.into_iter().map(|i| entries[i].clone()).collect();
        }
        for e in &mut entries {
            e.stamp = stamp;
        }
        self.slabs.push_back(Slab { stamp, entries });
        while self.slabs.len() > self.depth {
            self.slabs.pop_front();
        }
        Ok(())
    }

    /// Read-only view over all retained entries, oldest slab first. When the
    /// category filter is enabled, entries sharing the anchor's category are
    /// removed, consistent with category-aware negative sampling.
    pub fn snapshot_negatives(&self, anchor_category: u8, category_filter: bool) -> Vec<&BankEntry> {
        self.slabs
            .iter()
            .flat_map(|s| s.entries.iter())
            .filter(|e| !category_filter || e.category != anchor_category)
            .collect()
    }

    /// Detached copy of the full snapshot in plan-slot order, for the
    /// contrastive loss. Per-anchor category filtering happens during plan
    /// construction.
    pub fn view(&self) -> BankNegatives {
        let mut view = BankNegatives::default();
        for slab in &self.slabs {
            for entry in &slab.entries {
                view.embeddings.push(entry.embedding.clone());
                view.categories.push(entry.category);
            }
        }
        view
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::streams;
    use ndarray::array;

    fn entry(category: u8, value: f64) -> BankEntry {
        BankEntry {
            embedding: array![value, 1.0 - value],
            category,
            stamp: 0,
        }
    }

    fn rng(i: u64) -> RngHandle {
        RngHandle::new(5).substream(streams::BANK_SUBSAMPLE, i)
    }

    #[test]
    fn fifo_eviction_over_depth() {
        let mut bank = MemoryBank::new(3, 16);
        for stamp in 1..=4 {
            bank.push_batch(vec![entry(0, stamp as f64)], stamp, &rng(stamp))
                .unwrap();
        }
        assert_eq!(bank.stamps(), vec![2, 3, 4]);
    }

    #[test]
    fn depth_zero_bank_stays_empty() {
        let mut bank = MemoryBank::new(0, 16);
        for stamp in 1..=5 {
            bank.push_batch(vec![entry(0, 0.5); 4], stamp, &rng(stamp)).unwrap();
        }
        assert!(bank.is_empty());
        assert!(bank.snapshot_negatives(0, false).is_empty());
        assert!(bank.view().is_empty());
    }

    #[test]
    fn snapshot_size_sums_slabs() {
        let mut bank = MemoryBank::new(3, 64);
        bank.push_batch(vec![entry(0, 0.1); 10], 1, &rng(1)).unwrap();
        bank.push_batch(vec![entry(1, 0.2); 20], 2, &rng(2)).unwrap();
        bank.push_batch(vec![entry(2, 0.3); 30], 3, &rng(3)).unwrap();
        assert_eq!(bank.len(), 60);
        assert_eq!(bank.snapshot_negatives(9, true).len(), 60);
        assert_eq!(bank.view().len(), 60);
    }

    #[test]
    fn capacity_subsamples_uniformly() {
        let mut bank = MemoryBank::new(1, 8);
        let entries: Vec<BankEntry> = (0..32).map(|i| entry(i as u8 % 5, i as f64 / 32.0)).collect();
        bank.push_batch(entries, 1, &rng(1)).unwrap();
        assert_eq!(bank.len(), 8);
    }

    #[test]
    fn non_monotonic_stamp_rejected() {
        let mut bank = MemoryBank::new(3, 8);
        bank.push_batch(vec![entry(0, 0.5)], 5, &rng(1)).unwrap();
        let err = bank.push_batch(vec![entry(0, 0.5)], 5, &rng(2)).unwrap_err();
        assert!(matches!(err, BankError::NonMonotonicStamp { new: 5, last: 5 }));
    }

    #[test]
    fn category_filter_matches_hand_count() {
        let mut bank = MemoryBank::new(1, 8);
        bank.push_batch(
            vec![entry(1, 0.1), entry(1, 0.2), entry(2, 0.3), entry(3, 0.4)],
            1,
            &rng(1),
        )
        .unwrap();
        assert_eq!(bank.snapshot_negatives(1, true).len(), 2);
        assert_eq!(bank.snapshot_negatives(1, false).len(), 4);
    }

    #[test]
    fn stored_entries_are_detached_copies() {
        let mut bank = MemoryBank::new(1, 8);
        let mut source = entry(0, 0.25);
        bank.push_batch(vec![source.clone()], 1, &rng(1)).unwrap();
        source.embedding[0] = 99.0;
        let view = bank.view();
        assert_eq!(view.embeddings[0][0], 0.25);
    }

    #[test]
    fn retention_window_exact() {
        let mut bank = MemoryBank::new(3, 4);
        for stamp in 1..=10 {
            bank.push_batch(vec![entry(0, 0.5); 2], stamp, &rng(stamp)).unwrap();
        }
        assert_eq!(bank.stamps(), vec![8, 9, 10]);
        assert_eq!(bank.len(), 6);
        assert!(bank.len() <= bank.depth() * bank.capacity());
    }
}
