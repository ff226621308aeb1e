//! Class-balanced batch sampling with per-class permutation queues.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::Label;
use crate::tensor::{Result, TensorError};

/// Draws `per_class` indices from every class per batch. Each class is
/// consumed from a shuffled queue that is refilled when exhausted, so small
/// classes are oversampled and no index repeats before its class is spent.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    per_class: usize,
    pools: Vec<Vec<usize>>,
    queues: Vec<Vec<usize>>,
}

impl BalancedSampler {
    /// `labels[i]` is the class of dataset index `i`.
    pub fn new(labels: &[Label], per_class: usize) -> Result<BalancedSampler> {
        if per_class == 0 {
            return Err(TensorError::Invalid("per_class must be at least 1".into()));
        }
        let mut pools = alloc::vec![Vec::new(); Label::COUNT];
        for (i, l) in labels.iter().enumerate() {
            pools[l.index()].push(i);
        }
        if let Some(empty) = pools.iter().position(|p| p.is_empty()) {
            return Err(TensorError::Invalid(alloc::format!(
                "class {} has no training samples",
                Label::ALL[empty]
            )));
        }
        Ok(BalancedSampler {
            per_class,
            queues: alloc::vec![Vec::new(); Label::COUNT],
            pools,
        })
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn batch_size(&self) -> usize {
        self.per_class * Label::COUNT
    }

    /// Batches drawing as many samples as the training set holds.
    pub fn batches_per_epoch(&self) -> usize {
        let total: usize = self.pools.iter().map(Vec::len).sum();
        total.div_ceil(self.batch_size())
    }

    /// Indices grouped by class in `Label` order.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size());
        for (pool, queue) in self.pools.iter().zip(self.queues.iter_mut()) {
            for _ in 0..self.per_class {
                if queue.is_empty() {
                    queue.extend_from_slice(pool);
                    queue.shuffle(rng);
                }
                out.push(queue.pop().expect("refilled above"));
            }
        }
        out
    }
}
