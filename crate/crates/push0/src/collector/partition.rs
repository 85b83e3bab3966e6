//! Partition-affine routing.
//!
//! A partitioned queue splits into subjects `<queue>.p0 .. <queue>.p{C-1}`.
//! Dispatchers route each result to `partition = group_key mod C`, so every
//! fragment of a barrier group lands on the same collector and groups
//! complete without any cross-collector coordination. The alternative —
//! letting fragments land anywhere — leaves a group whole only when all `k`
//! fragments happen to hit one collector, which occurs with probability
//! `C^-(k-1)`.
//!
//! Scaling down does not re-route: a collector that survives simply adopts
//! the original partitions congruent to its index modulo the new collector
//! count, so affinity (and thus buffered state locality) is preserved for
//! every group.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use crate::model::GroupKey;

/// Subject name of partition `i` of `queue`.
pub fn partition_subject(queue: &str, i: u32) -> String {
    format!("{queue}.p{i}")
}

/// The partition a group key routes to among `num_collectors`.
pub fn partition_for_key(key: GroupKey, num_collectors: u32) -> u32 {
    (key % num_collectors.max(1) as u64) as u32
}

/// The original partitions collector `index` serves when only `active` of
/// the `original` collectors remain: every `j < original` with
/// `j mod active == index`. With all collectors up this is just `{index}`.
pub fn owned_partitions(index: u32, original: u32, active: u32) -> Vec<u32> {
    let active = active.max(1);
    (0..original).filter(|j| j % active == index).collect()
}

/// Probability that all `k` fragments of one group land on a single one of
/// `c` collectors under uniform random routing: `c^-(k-1)`.
pub fn fragmentation_probability(c: u32, k: u32) -> f64 {
    let c = c.max(1) as f64;
    c.powi(-((k.max(1) - 1) as i32))
}

/// Shared routing view for a collector fleet. Scaling down bumps the active
/// count; collectors poll the version and rebuild their subscriptions to
/// [`owned_partitions`] when it moves.
#[derive(Debug)]
pub struct RoutingState {
    original: u32,
    active: AtomicU32,
    version: AtomicU64,
}

impl RoutingState {
    pub fn new(num_collectors: u32) -> Self {
        RoutingState {
            original: num_collectors,
            active: AtomicU32::new(num_collectors),
            version: AtomicU64::new(0),
        }
    }

    /// Collector count the pipeline was launched with (= partition count).
    pub fn original(&self) -> u32 {
        self.original
    }

    pub fn active(&self) -> u32 {
        self.active.load(Ordering::SeqCst)
    }

    pub fn version(&self) -> u64 {
        self.version.load(Ordering::SeqCst)
    }

    /// Change the live collector count (clamped to `1..=original`).
    /// Collectors with `index >= active` drain and exit; the rest adopt the
    /// orphaned partitions.
    pub fn scale_to(&self, active: u32) {
        let clamped = active.clamp(1, self.original.max(1));
        self.active.store(clamped, Ordering::SeqCst);
        self.version.fetch_add(1, Ordering::SeqCst);
    }

    /// Partitions collector `index` should currently serve (empty when the
    /// collector has been scaled out of the fleet).
    pub fn partitions_for(&self, index: u32) -> Vec<u32> {
        let active = self.active();
        if index >= active {
            return Vec::new();
        }
        owned_partitions(index, self.original, active)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_names_are_flat() {
        assert_eq!(partition_subject("recursion_queue", 0), "recursion_queue.p0");
        assert_eq!(partition_subject("q", 11), "q.p11");
    }

    #[test]
    fn integer_keys_route_by_modulus() {
        assert_eq!(partition_for_key(0, 4), 0);
        assert_eq!(partition_for_key(7, 4), 3);
        assert_eq!(partition_for_key(8, 4), 0);
        assert_eq!(partition_for_key(123_456_789, 1), 0);
    }

    #[test]
    fn full_fleet_owns_own_index_only() {
        for i in 0..4 {
            assert_eq!(owned_partitions(i, 4, 4), vec![i]);
        }
    }

    #[test]
    fn halved_fleet_adopts_congruent_partitions() {
        assert_eq!(owned_partitions(0, 4, 2), vec![0, 2]);
        assert_eq!(owned_partitions(1, 4, 2), vec![1, 3]);
        // Union covers everything exactly once.
        let mut all: Vec<u32> = owned_partitions(0, 4, 2);
        all.extend(owned_partitions(1, 4, 2));
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn lone_survivor_owns_everything() {
        assert_eq!(owned_partitions(0, 4, 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn ownership_partitions_cover_without_overlap_for_any_fleet() {
        for original in 1..=8u32 {
            for active in 1..=original {
                let mut seen = vec![0u32; original as usize];
                for index in 0..active {
                    for p in owned_partitions(index, original, active) {
                        seen[p as usize] += 1;
                    }
                }
                assert!(seen.iter().all(|&n| n == 1), "original={original} active={active}");
            }
        }
    }

    #[test]
    fn fragmentation_probability_matches_closed_form() {
        assert_eq!(fragmentation_probability(4, 4), 0.015625);
        assert_eq!(fragmentation_probability(4, 8), 6.103515625e-5);
        assert_eq!(fragmentation_probability(2, 3), 0.25);
        assert_eq!(fragmentation_probability(1, 5), 1.0);
        assert_eq!(fragmentation_probability(7, 1), 1.0);
    }

    #[test]
    fn routing_state_scale_down_bumps_version() {
        let r = RoutingState::new(4);
        assert_eq!(r.partitions_for(3), vec![3]);
        let v0 = r.version();
        r.scale_to(2);
        assert!(r.version() > v0);
        assert_eq!(r.partitions_for(0), vec![0, 2]);
        assert_eq!(r.partitions_for(1), vec![1, 3]);
        assert_eq!(r.partitions_for(2), Vec::<u32>::new());
        assert_eq!(r.partitions_for(3), Vec::<u32>::new());
        r.scale_to(0); // clamped to one survivor
        assert_eq!(r.active(), 1);
        assert_eq!(r.partitions_for(0), vec![0, 1, 2, 3]);
    }
}
