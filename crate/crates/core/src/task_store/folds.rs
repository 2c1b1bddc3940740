use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

/// Assignment of dataset indices to cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    fold_count: usize,
    assignments: Vec<usize>,
}

impl FoldSplit {
    pub fn fold_count(&self) -> usize {
        self.fold_count
    }

    /// Fold index of each sample index.
    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// Sample indices of `fold`, ascending.
    pub fn validation(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    /// Sample indices outside `fold`, ascending.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.fold_count];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles the indices with `seed` and deals them round-robin into folds,
/// so fold sizes differ by at most one.
pub fn make_folds(dataset_size: usize, fold_count: usize, seed: u64) -> Result<FoldSplit> {
    if fold_count == 0 || dataset_size < fold_count {
        return Err(Error::InvalidArgument(format!(
            "cannot split {dataset_size} samples into {fold_count} folds"
        )));
    }
    let mut order: Vec<usize> = (0..dataset_size).collect();
    order.shuffle(&mut seed::rng_for(seed, &["folds"]));
    let mut assignments = vec![0; dataset_size];
    for (pos, &idx) in order.iter().enumerate() {
        assignments[idx] = pos % fold_count;
    }
    Ok(FoldSplit {
        fold_count,
        assignments,
    })
}
