//! push0: prover-agnostic orchestration for ordered, fault-tolerant proof pipelines.
//!
//! The crate embeds a persistent priority message bus and builds three layers on
//! top of it: stateless dispatchers that pull tasks and invoke provers,
//! barrier-synchronizing collectors that reassemble grouped results with
//! partition-affine routing, and a declarative pipeline runtime that wires both
//! into multi-queue topologies. A benchmark/chaos harness drives the whole stack
//! under fault schedules and reproduces the reference experiments at desk scale.
//!
//! The primary interface is the `examples/` directory: each file is a runnable
//! demonstration of one capability (`cargo run --example single_queue`, ...).
//! The thin `push0` binary exposes the same harness as subcommands
//! (`push0 run|bench|exp|chaos|verify`).

pub mod bus;
pub mod collector;
pub mod dispatcher;
pub mod executor;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod payload;
pub mod pipeline;
pub mod trace;

pub use bus::{Bus, BusOptions, Consumer, ConsumerHandle, Delivery, QueueConfig, StreamState};
pub use model::{extract_group_key, priority_key, GroupKey, PriorityKey, TaskEnvelope};
pub use payload::{Payload, Value};
