//! Completion rules for barrier groups.
//!
//! A strategy answers two questions the collector core cannot answer by
//! itself: which group does a task belong to, and is a group done? The core
//! owns buffering, deduplication, acknowledgement, and timeouts; the
//! strategy owns only the completion decision, so new aggregation shapes
//! (joins over several queues, windows over block ranges, order-gated
//! commits) are a few dozen lines each.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;

use crate::model::{extract_block, extract_group_key, GroupKey, KeyError};
use crate::payload::Payload;

/// The strategy's verdict after a member joins a group (or a postponed group
/// comes due).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CollectorOperation {
    /// Keep buffering.
    InProgress,
    /// These groups are ready: emit their barriers now, in this order.
    Finished(Vec<GroupKey>),
    /// Ask again after `delay` — the decision depends on something that
    /// hasn't happened yet (typically a predecessor group).
    Postpone { delay: Duration },
    /// This member does not belong in the barrier: acknowledge and discard
    /// it, leaving the group as it was.
    Skip,
}

/// Read-only view of one buffered group, handed to the strategy.
pub struct GroupView<'a> {
    pub group: GroupKey,
    /// Accepted member payloads, in arrival order (the newest last).
    pub members: Vec<&'a Payload>,
    /// Resolved member target: the first member's `expected_inputs` override
    /// when present, the configured input count otherwise.
    pub expected: u64,
    /// Time since the group's first member arrived.
    pub age: Duration,
}

pub trait CollectStrategy: Send {
    /// The group a payload belongs to. Errors reject the task.
    fn group_for(&self, payload: &Payload) -> Result<GroupKey, KeyError>;

    /// Completion verdict for `view.group` after its newest member (or a
    /// postponement elapsing).
    fn assess(&mut self, view: &GroupView) -> CollectorOperation;

    /// Called once per emitted barrier, in emission order — the hook ordering
    /// strategies use to advance their watermark.
    fn committed(&mut self, _group: GroupKey) {}
}

// ---------------------------------------------------------------------------
// Match: k distinct contributions per group
// ---------------------------------------------------------------------------

/// Complete when a group has `expected` distinct members — the fan-in
/// barrier. Grouping uses one payload field; integers group by value,
/// strings by a stable hash.
pub struct MatchStrategy {
    pub grouping_field: String,
}

impl CollectStrategy for MatchStrategy {
    fn group_for(&self, payload: &Payload) -> Result<GroupKey, KeyError> {
        extract_group_key(payload, &self.grouping_field)
    }

    fn assess(&mut self, view: &GroupView) -> CollectorOperation {
        if view.members.len() as u64 >= view.expected {
            CollectorOperation::Finished(vec![view.group])
        } else {
            CollectorOperation::InProgress
        }
    }
}

// ---------------------------------------------------------------------------
// Sequential: windows of consecutive blocks
// ---------------------------------------------------------------------------

/// Complete when a window of `window` consecutive block numbers is fully
/// covered: block `b` belongs to window `b / window`, and the window closes
/// once every distinct block in it has contributed at least one member.
/// Multiple tasks per block are welcome — coverage counts distinct blocks,
/// and the barrier carries everything that arrived.
pub struct SequentialStrategy {
    pub block_field: String,
    pub window: u64,
}

impl SequentialStrategy {
    fn distinct_blocks(&self, view: &GroupView) -> u64 {
        view.members
            .iter()
            .filter_map(|p| extract_block(p, &self.block_field).ok())
            .collect::<BTreeSet<u64>>()
            .len() as u64
    }
}

impl CollectStrategy for SequentialStrategy {
    fn group_for(&self, payload: &Payload) -> Result<GroupKey, KeyError> {
        Ok(extract_block(payload, &self.block_field)? / self.window.max(1))
    }

    fn assess(&mut self, view: &GroupView) -> CollectorOperation {
        if self.distinct_blocks(view) >= self.window.max(1) {
            CollectorOperation::Finished(vec![view.group])
        } else {
            CollectorOperation::InProgress
        }
    }
}

// ---------------------------------------------------------------------------
// Ordered commit: complete groups released strictly in group order
// ---------------------------------------------------------------------------

/// A `MatchStrategy` whose emissions are gated on order: a complete group is
/// held until every lower-numbered group has been emitted, then released
/// together with any successors it unblocks. The canonical use is block
/// finalization, where proofs may finish out of order but must commit in
/// chain order.
pub struct OrderedCommitStrategy {
    inner: MatchStrategy,
    next: GroupKey,
    held: BTreeSet<GroupKey>,
}

impl OrderedCommitStrategy {
    pub fn new(grouping_field: impl Into<String>, first_group: GroupKey) -> Self {
        OrderedCommitStrategy {
            inner: MatchStrategy {
                grouping_field: grouping_field.into(),
            },
            next: first_group,
            held: BTreeSet::new(),
        }
    }
}

impl CollectStrategy for OrderedCommitStrategy {
    fn group_for(&self, payload: &Payload) -> Result<GroupKey, KeyError> {
        self.inner.group_for(payload)
    }

    fn assess(&mut self, view: &GroupView) -> CollectorOperation {
        match self.inner.assess(view) {
            CollectorOperation::Finished(_) => {
                self.held.insert(view.group);
                let mut run = Vec::new();
                while self.held.remove(&self.next) {
                    run.push(self.next);
                    self.next += 1;
                }
                if run.is_empty() {
                    // Complete but out of turn: parked until the gap fills.
                    CollectorOperation::InProgress
                } else {
                    CollectorOperation::Finished(run)
                }
            }
            other => other,
        }
    }
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Factory for a named custom strategy. Each collector gets its own instance
/// so strategies may keep per-collector state.
pub type StrategyFactory = Arc<dyn Fn() -> Box<dyn CollectStrategy> + Send + Sync>;

/// Named custom strategies, shared by reference across a process.
#[derive(Clone, Default)]
pub struct StrategyRegistry {
    map: Arc<RwLock<std::collections::HashMap<String, StrategyFactory>>>,
}

impl StrategyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&self, name: impl Into<String>, factory: F)
    where
        F: Fn() -> Box<dyn CollectStrategy> + Send + Sync + 'static,
    {
        self.map.write().insert(name.into(), Arc::new(factory));
    }

    pub fn build(&self, name: &str) -> Option<Box<dyn CollectStrategy>> {
        self.map.read().get(name).map(|f| f())
    }
}

/// Which completion rule a collector runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StrategySpec {
    Match,
    Sequential,
    Custom(String),
}

impl StrategySpec {
    /// `"match"`, `"sequential"`, anything else names a registered custom
    /// strategy.
    pub fn parse(s: &str) -> StrategySpec {
        match s.to_ascii_lowercase().as_str() {
            "match" => StrategySpec::Match,
            "sequential" => StrategySpec::Sequential,
            _ => StrategySpec::Custom(s.to_string()),
        }
    }

    pub fn build(
        &self,
        grouping_field: &str,
        num_inputs: u64,
        registry: Option<&StrategyRegistry>,
    ) -> Result<Box<dyn CollectStrategy>, String> {
        match self {
            StrategySpec::Match => Ok(Box::new(MatchStrategy {
                grouping_field: grouping_field.to_string(),
            })),
            StrategySpec::Sequential => Ok(Box::new(SequentialStrategy {
                block_field: grouping_field.to_string(),
                window: num_inputs,
            })),
            StrategySpec::Custom(name) => registry
                .and_then(|r| r.build(name))
                .ok_or_else(|| format!("no custom collect strategy registered as `{name}`")),
        }
    }
}

impl std::fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StrategySpec::Match => write!(f, "match"),
            StrategySpec::Sequential => write!(f, "sequential"),
            StrategySpec::Custom(name) => write!(f, "{name}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view<'a>(group: GroupKey, members: Vec<&'a Payload>, expected: u64) -> GroupView<'a> {
        GroupView {
            group,
            members,
            expected,
            age: Duration::ZERO,
        }
    }

    fn task(block: i64, idx: i64) -> Payload {
        Payload::new().with("block_num", block).with("task_index", idx)
    }

    #[test]
    fn match_completes_at_expected_count() {
        let mut s = MatchStrategy {
            grouping_field: "block_num".to_string(),
        };
        let a = task(5, 0);
        let b = task(5, 1);
        let c = task(5, 2);
        assert_eq!(s.group_for(&a).unwrap(), 5);
        assert_eq!(s.assess(&view(5, vec![&a], 3)), CollectorOperation::InProgress);
        assert_eq!(s.assess(&view(5, vec![&a, &b], 3)), CollectorOperation::InProgress);
        assert_eq!(
            s.assess(&view(5, vec![&a, &b, &c], 3)),
            CollectorOperation::Finished(vec![5])
        );
    }

    #[test]
    fn match_groups_strings_by_stable_hash() {
        let s = MatchStrategy {
            grouping_field: "batch_id".to_string(),
        };
        let p = Payload::new().with("batch_id", "batch-7");
        assert_eq!(s.group_for(&p).unwrap(), 17900234588114955631);
    }

    #[test]
    fn sequential_window_needs_every_distinct_block() {
        let mut s = SequentialStrategy {
            block_field: "block_num".to_string(),
            window: 3,
        };
        // Blocks 0..3 form window 0; 3..6 form window 1.
        assert_eq!(s.group_for(&task(0, 0)).unwrap(), 0);
        assert_eq!(s.group_for(&task(2, 0)).unwrap(), 0);
        assert_eq!(s.group_for(&task(3, 0)).unwrap(), 1);
        let a = task(0, 0);
        let b = task(1, 0);
        let b2 = task(1, 1); // second task for the same block: no new coverage
        let c = task(2, 0);
        assert_eq!(s.assess(&view(0, vec![&a, &b], 3)), CollectorOperation::InProgress);
        assert_eq!(
            s.assess(&view(0, vec![&a, &b, &b2], 3)),
            CollectorOperation::InProgress
        );
        assert_eq!(
            s.assess(&view(0, vec![&a, &b, &b2, &c], 3)),
            CollectorOperation::Finished(vec![0])
        );
    }

    #[test]
    fn ordered_commit_holds_early_finishers() {
        let mut s = OrderedCommitStrategy::new("block_num", 0);
        let b1 = task(1, 0);
        let b0 = task(0, 0);
        let b2 = task(2, 0);
        // Block 1 completes first: held, nothing released.
        assert_eq!(s.assess(&view(1, vec![&b1], 1)), CollectorOperation::InProgress);
        // Block 2 completes: still gapped on 0.
        assert_eq!(s.assess(&view(2, vec![&b2], 1)), CollectorOperation::InProgress);
        // Block 0 completes: the whole run releases in order.
        assert_eq!(
            s.assess(&view(0, vec![&b0], 1)),
            CollectorOperation::Finished(vec![0, 1, 2])
        );
        // And the watermark advanced past the run.
        let b3 = task(3, 0);
        assert_eq!(
            s.assess(&view(3, vec![&b3], 1)),
            CollectorOperation::Finished(vec![3])
        );
    }

    #[test]
    fn spec_parsing_and_custom_lookup() {
        assert_eq!(StrategySpec::parse("match"), StrategySpec::Match);
        assert_eq!(StrategySpec::parse("SEQUENTIAL"), StrategySpec::Sequential);
        assert_eq!(
            StrategySpec::parse("ordered_commit"),
            StrategySpec::Custom("ordered_commit".to_string())
        );

        let reg = StrategyRegistry::new();
        reg.register("ordered_commit", || {
            Box::new(OrderedCommitStrategy::new("block_num", 0))
        });
        assert!(StrategySpec::parse("ordered_commit")
            .build("block_num", 1, Some(&reg))
            .is_ok());
        assert!(StrategySpec::parse("unknown")
            .build("block_num", 1, Some(&reg))
            .is_err());
        // Builtins never consult the registry.
        assert!(StrategySpec::Match.build("block_num", 4, None).is_ok());
    }
}
