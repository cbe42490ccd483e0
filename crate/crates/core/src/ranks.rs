//! Worker rank bookkeeping for merges and splits.
//!
//! A scale-up merges `tp_to / tp_from` instances of degree `tp_from` into one
//! instance. Worker `w` of the merged group belongs to old instance
//! `w / tp_from` with old rank `w % tp_from`. Its new rank is chosen so the
//! new shard is contained in the shard it already holds:
//! `new = old_rank * (tp_to / tp_from) + old_instance`.
//!
//! A scale-down is the inverse: worker `w` (old rank) joins new instance
//! `w % m` with new rank `w / m`, where `m = tp_from / tp_to`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankMove {
    pub worker: usize,
    pub old_instance: usize,
    pub old_rank: usize,
    pub new_instance: usize,
    pub new_rank: usize,
}

/// Whether `a -> b` is a valid merge or split between TP degrees.
pub fn compatible(tp_from: usize, tp_to: usize) -> bool {
    tp_from > 0 && tp_to > 0 && (tp_to.is_multiple_of(tp_from) || tp_from.is_multiple_of(tp_to))
}

/// Number of workers taking part in a transformation.
pub fn group_size(tp_from: usize, tp_to: usize) -> usize {
    tp_from.max(tp_to)
}

pub fn rank_move(worker: usize, tp_from: usize, tp_to: usize) -> RankMove {
    debug_assert!(compatible(tp_from, tp_to));
    if tp_to >= tp_from {
        let m = tp_to / tp_from;
        let (old_instance, old_rank) = (worker / tp_from, worker % tp_from);
        RankMove {
            worker,
            old_instance,
            old_rank,
            new_instance: 0,
            new_rank: old_rank * m + old_instance,
        }
    } else {
        let m = tp_from / tp_to;
        RankMove {
            worker,
            old_instance: 0,
            old_rank: worker,
            new_instance: worker % m,
            new_rank: worker / m,
        }
    }
}

/// The worker that holds rank `rank` of new instance `instance` after the move.
pub fn worker_for(instance: usize, rank: usize, tp_from: usize, tp_to: usize) -> usize {
    if tp_to >= tp_from {
        let m = tp_to / tp_from;
        // rank = old_rank * m + old_instance
        (rank % m) * tp_from + rank / m
    } else {
        let m = tp_from / tp_to;
        rank * m + instance
    }
}

/// Split weighted items into `parts` groups, largest first onto the lightest
/// group (lowest index on ties). Returns item -> group.
pub fn lpt_split(weights: &BTreeMap<u64, u64>, parts: usize) -> BTreeMap<u64, usize> {
    let mut items: Vec<(u64, u64)> = weights.iter().map(|(&k, &w)| (k, w)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut load = vec![0u64; parts.max(1)];
    let mut out = BTreeMap::new();
    for (k, w) in items {
        let g = (0..load.len()).min_by_key(|&i| (load[i], i)).unwrap_or(0);
        load[g] += w;
        out.insert(k, g);
    }
    out
}
