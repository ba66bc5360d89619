//! Per-epoch shard order and worker assignment.
//!
//! The shard order for `(seed, epoch)` is a Fisher–Yates permutation drawn
//! from `Prng::derived(seed, epoch)`; worker `w` of `W` takes the shards at
//! positions `w, w + W, w + 2W, ...`. Shards are never split across workers.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::rng::{fisher_yates, Prng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub seed: u64,
    pub epoch: u64,
    pub shard_order: Vec<String>,
    pub worker_slices: Vec<Vec<String>>,
}

/// Builds the plan. `shards` should be sorted so that the plan depends only
/// on the set of names; `num_workers` of 0 is treated as 1.
pub fn make_epoch_plan(shards: &[String], seed: u64, epoch: u64, num_workers: usize) -> EpochPlan {
    let workers = num_workers.max(1);
    let mut shard_order = shards.to_vec();
    fisher_yates(&mut shard_order, &mut Prng::derived(seed, epoch));
    let mut worker_slices = alloc::vec![Vec::new(); workers];
    for (i, s) in shard_order.iter().enumerate() {
        worker_slices[i % workers].push(s.clone());
    }
    EpochPlan {
        seed,
        epoch,
        shard_order,
        worker_slices,
    }
}

impl EpochPlan {
    /// Seed for worker `w`'s record-level shuffle buffer in this epoch.
    pub fn worker_seed(&self, worker: usize) -> u64 {
        crate::rng::mix(crate::rng::mix(self.seed, self.epoch), worker as u64 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("shard-{i:06}.tar")).collect()
    }

    fn sizes(p: &EpochPlan) -> Vec<usize> {
        p.worker_slices.iter().map(Vec::len).collect()
    }

    #[test]
    fn divisible() {
        let p = make_epoch_plan(&names(8), 1, 0, 4);
        assert_eq!(sizes(&p), [2, 2, 2, 2]);
        let mut all: Vec<String> = p.worker_slices.concat();
        all.sort();
        assert_eq!(all, names(8));
    }

    #[test]
    fn remainder_goes_to_earlier_workers() {
        // Round-robin count oracle: worker w gets ceil((n - w) / W).
        let p = make_epoch_plan(&names(10), 1, 0, 4);
        let oracle: Vec<usize> = (0..4usize).map(|w| (10 - w).div_ceil(4)).collect();
        assert_eq!(sizes(&p), oracle);
        assert_eq!(oracle, [3, 3, 2, 2]);
    }

    #[test]
    fn reseeds_per_epoch() {
        let a = make_epoch_plan(&names(20), 5, 3, 3);
        assert_eq!(a, make_epoch_plan(&names(20), 5, 3, 3));
        let b = make_epoch_plan(&names(20), 5, 4, 3);
        assert_ne!(a.shard_order, b.shard_order);
        assert_eq!(sizes(&a), sizes(&b));
    }

    #[test]
    fn slices_preserve_global_order() {
        let p = make_epoch_plan(&names(9), 2, 1, 2);
        let pos = |s: &String| p.shard_order.iter().position(|x| x == s).unwrap();
        for slice in &p.worker_slices {
            assert!(slice.windows(2).all(|w| pos(&w[0]) < pos(&w[1])));
        }
    }
}
