//! Ready-made pipeline shapes.
//!
//! Each builder returns a [`PipelineConfig`] the caller can launch as-is,
//! tweak programmatically, or override per-stage from the environment. They
//! double as live documentation of the config surface: `to_toml()` on any of
//! them prints a complete, valid pipeline file.

use super::{PipelineConfig, StageConfig};

/// Names accepted by [`builtin_topology`].
pub const TOPOLOGY_NAMES: &[&str] = &[
    "single_chain",
    "parallel_dispatchers",
    "fan_in",
    "multi_queue_join",
    "production_chain",
];

/// Look up a builtin shape by name (prefixes work: `"single"`, `"parallel"`,
/// `"join"`...), with default sizes.
pub fn builtin_topology(name: &str) -> Option<PipelineConfig> {
    let name = name.to_ascii_lowercase();
    if "single_chain".starts_with(&name) {
        Some(single_chain())
    } else if "parallel_dispatchers".starts_with(&name) {
        Some(parallel_dispatchers(4))
    } else if "fan_in".starts_with(&name) {
        Some(fan_in(8, 4))
    } else if "multi_queue_join".starts_with(&name) || "join".starts_with(&name) {
        Some(multi_queue_join(9))
    } else if "production_chain".starts_with(&name) {
        Some(production_chain())
    } else {
        None
    }
}

/// The smallest useful pipeline: one dispatcher pulling `tasks`, publishing
/// `proofs`.
pub fn single_chain() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    let mut exec = StageConfig::dispatcher("tasks", "proofs", "sim:echo");
    exec.terminal = Some(true);
    cfg.stages.insert("exec".to_string(), exec);
    cfg
}

/// One stage, `n` competing workers on a priority-ordered queue. Tasks carry
/// `prove_millis` to set their own cost; lower `block_num` runs first.
pub fn parallel_dispatchers(n: u32) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    let mut exec = StageConfig::dispatcher("tasks", "proofs", "sim:delay:prove_millis");
    exec.replicas = Some(n);
    exec.priority_field = Some("block_num".to_string());
    exec.terminal = Some(true);
    cfg.stages.insert("exec".to_string(), exec);
    cfg
}

/// Dispatcher fan-out into a partitioned collector fleet: `num_inputs` task
/// results per block form one barrier, `num_collectors` collectors own the
/// partition space.
pub fn fan_in(num_inputs: u64, num_collectors: u32) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.stages.insert(
        "exec".to_string(),
        StageConfig::dispatcher("tasks", "proofs", "sim:echo"),
    );
    let mut agg = StageConfig::collector("proofs", "batches", num_inputs);
    agg.num_collectors = Some(num_collectors);
    agg.terminal = Some(true);
    cfg.stages.insert("aggregate".to_string(), agg);
    cfg
}

/// Two independent dispatcher tracks whose outputs join in one collector:
/// a block is done when `num_inputs` contributions arrive *across both
/// queues* (the same task id on each queue counts once per queue).
pub fn multi_queue_join(num_inputs: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.stages.insert(
        "thin".to_string(),
        StageConfig::dispatcher("thin_tasks", "thin_proofs", "sim:echo"),
    );
    cfg.stages.insert(
        "heavy".to_string(),
        StageConfig::dispatcher("heavy_tasks", "heavy_proofs", "sim:echo"),
    );
    let mut join = StageConfig::collector("thin_proofs", "joined", num_inputs);
    join.input_queue = super::QueueRef::Many(vec![
        "thin_proofs".to_string(),
        "heavy_proofs".to_string(),
    ]);
    join.terminal = Some(true);
    cfg.stages.insert("join".to_string(), join);
    cfg
}

/// A full proving chain:
///
/// ```text
/// blocks ─▶ witness ─▶ prove (×4, priority) ─▶ aggregate (8-way barrier,
///   4 partitioned collectors) ─▶ batch_prove ─▶ finalize (3-block windows)
/// ```
///
/// Block tasks fan out into per-block proof barriers, barriers are proved
/// again as batches, and finished batches commit in consecutive 3-block
/// windows.
pub fn production_chain() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.stages.insert(
        "witness".to_string(),
        StageConfig::dispatcher("blocks", "witnesses", "sim:echo"),
    );
    let mut prove = StageConfig::dispatcher("witnesses", "proofs", "sim:delay:prove_millis");
    prove.replicas = Some(4);
    prove.priority_field = Some("block_num".to_string());
    cfg.stages.insert("prove".to_string(), prove);
    let mut agg = StageConfig::collector("proofs", "batches", 8);
    agg.num_collectors = Some(4);
    cfg.stages.insert("aggregate".to_string(), agg);
    cfg.stages.insert(
        "batch_prove".to_string(),
        StageConfig::dispatcher("batches", "batch_proofs", "sim:echo"),
    );
    let mut fin = StageConfig::collector("batch_proofs", "finalized", 3);
    fin.strategy = Some("sequential".to_string());
    fin.terminal = Some(true);
    cfg.stages.insert("finalize".to_string(), fin);
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::StageKind;

    #[test]
    fn every_builtin_parses_back_from_its_own_toml() {
        for name in TOPOLOGY_NAMES {
            let cfg = builtin_topology(name).unwrap();
            let text = cfg.to_toml();
            let back = PipelineConfig::from_toml(&text).unwrap();
            assert_eq!(back.stages.len(), cfg.stages.len(), "{name}: {text}");
        }
    }

    #[test]
    fn production_chain_orders_stages_upstream_first() {
        let order = production_chain().dependency_order();
        assert_eq!(
            order,
            vec!["witness", "prove", "aggregate", "batch_prove", "finalize"]
        );
    }

    #[test]
    fn join_topology_feeds_one_collector_from_two_tracks() {
        let cfg = multi_queue_join(9);
        let order = cfg.dependency_order();
        assert_eq!(order.last().map(String::as_str), Some("join"));
        assert_eq!(cfg.stages["join"].kind(), StageKind::Collector);
        assert_eq!(cfg.stages["join"].input_queue.names().len(), 2);
    }

    #[test]
    fn prefix_lookup_finds_each_topology() {
        assert!(builtin_topology("single").is_some());
        assert!(builtin_topology("parallel").is_some());
        assert!(builtin_topology("fan").is_some());
        assert!(builtin_topology("join").is_some());
        assert!(builtin_topology("production").is_some());
        assert!(builtin_topology("nope").is_none());
    }
}
