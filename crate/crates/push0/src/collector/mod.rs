//! Barrier-synchronizing collectors with partition-affine routing.
//!
//! - [`partition`]: how groups map onto a collector fleet, and how the fleet
//!   re-maps when it shrinks.
//! - [`strategy`]: pluggable completion rules (fan-in match, sequential
//!   windows, ordered commit, custom).
//! - [`core`]: the engine — buffering, dedup, validation, barrier emission,
//!   drain and takeover.

mod core;
mod partition;
mod strategy;

pub use core::{
    spawn_collector, CollectorCore, CollectorError, CollectorHandle, CollectorOptions,
    CollectorStats, DrainOutcome, PartitionPlan, DEDUP_CAPACITY,
};
pub use partition::{
    fragmentation_probability, owned_partitions, partition_for_key, partition_subject,
    RoutingState,
};
pub use strategy::{
    CollectStrategy, CollectorOperation, GroupView, MatchStrategy, OrderedCommitStrategy,
    SequentialStrategy, StrategyFactory, StrategyRegistry, StrategySpec,
};
