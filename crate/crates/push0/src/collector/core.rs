//! The collector engine: buffering, deduplication, barrier emission.
//!
//! A collector buffers tasks into groups until its strategy declares a group
//! complete, then publishes one barrier message downstream and acknowledges
//! every member — in that order, so a collector lost mid-emission leaves
//! members claimed, their leases lapse, and the group re-forms on a
//! surviving collector. Nothing is acknowledged before its data has moved
//! forward.
//!
//! At-least-once delivery makes duplicates a fact of life rather than an
//! error. The core distinguishes three kinds and treats each differently:
//! a redelivery of a message still buffered refreshes the stored lease (no
//! ack — the message is still owed a barrier); a copy of a task already
//! buffered (speculative redundancy) is acknowledged and dropped; and
//! anything arriving for a group that already emitted is acknowledged and
//! dropped. Tasks that cannot be grouped at all — missing or ill-typed
//! grouping field, or routed to a partition their group doesn't hash to —
//! are rejected: acknowledged, counted, and kept out of every barrier.
//!
//! Collectors are partition-affine: a fleet of `C` collectors splits a
//! queue into subjects `<queue>.p<i>` and every group's members hash to
//! exactly one of them, so barriers never straddle collectors. When the
//! fleet shrinks, survivors take over the orphaned partitions (each index
//! `i` serves every original partition `j` with `j mod active == i`) and
//! the retiring collector drains: it keeps collecting for a grace period,
//! then abandons incomplete groups unacknowledged so they re-form on the
//! survivors.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::hash::Hash;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bus::{Bus, BusError, Consumer, ConsumerHandle, Delivery, QueueConfig};
use crate::collector::partition::{owned_partitions, partition_subject, RoutingState};
use crate::collector::strategy::{
    CollectStrategy, CollectorOperation, GroupView, StrategyRegistry, StrategySpec,
};
use crate::dispatcher::OutputRouting;
use crate::metrics::{Counter, Gauge, Histogram, MetricsRegistry};
use crate::model::{extract_group_key, GroupKey, KeyError};
use crate::payload::{Payload, Value};
use crate::trace::{SpanLog, TraceContext, TRACEPARENT};

/// Entries remembered per dedup set before the oldest are forgotten.
pub const DEDUP_CAPACITY: usize = 65536;

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("collector misconfigured: {0}")]
    Config(String),
    #[error(transparent)]
    Bus(#[from] BusError),
}

// ---------------------------------------------------------------------------
// Bounded dedup set
// ---------------------------------------------------------------------------

/// Insertion-ordered set with a hard capacity: inserting past the cap
/// forgets the oldest entry. Duplicate detection stays O(1) and memory stays
/// bounded no matter how long the process runs; a duplicate older than the
/// window is the redelivery path's problem again, which is safe (ack'd
/// twice at worst).
pub(crate) struct BoundedSet<T> {
    set: HashSet<T>,
    order: VecDeque<T>,
    cap: usize,
}

impl<T: Eq + Hash + Clone> BoundedSet<T> {
    pub fn new(cap: usize) -> Self {
        BoundedSet {
            set: HashSet::new(),
            order: VecDeque::new(),
            cap: cap.max(1),
        }
    }

    /// True when the value was new.
    pub fn insert(&mut self, value: T) -> bool {
        if self.set.contains(&value) {
            return false;
        }
        if self.order.len() == self.cap {
            if let Some(old) = self.order.pop_front() {
                self.set.remove(&old);
            }
        }
        self.order.push_back(value.clone());
        self.set.insert(value);
        true
    }

    pub fn contains(&self, value: &T) -> bool {
        self.set.contains(value)
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.set.len()
    }
}

// ---------------------------------------------------------------------------
// Options
// ---------------------------------------------------------------------------

/// This collector's place in a partitioned fleet.
#[derive(Clone)]
pub struct PartitionPlan {
    /// Which collector this is (`0..original`).
    pub index: u32,
    /// Fleet geometry, shared by every collector and whoever scales them.
    pub routing: Arc<RoutingState>,
}

pub struct CollectorOptions {
    /// Stage label for metrics and spans.
    pub stage: String,
    /// Base queues joined by this collector. One for plain fan-in; several
    /// for cross-queue joins (contributions are tracked per queue, so the
    /// same task id on two queues counts twice, as it should).
    pub input_queues: Vec<String>,
    /// Where barriers go; `None` for a terminal collector that only absorbs.
    pub output_queue: Option<String>,
    pub strategy: StrategySpec,
    /// Resolves custom strategy names.
    pub registry: Option<StrategyRegistry>,
    pub grouping_field: String,
    /// Members per barrier (or window width for sequential collection).
    /// Payloads may override it per group via `expected_inputs`.
    pub num_inputs: u64,
    /// How long a group may sit incomplete before it is flushed as a partial
    /// barrier (when partial flushing is on).
    pub collect_timeout: Duration,
    pub emit_partial_on_timeout: bool,
    /// Per-consumer in-flight window on each input queue. Backpressure and a
    /// memory bound in one: at most this many members can be buffered per
    /// queue awaiting their group, no matter how far one track runs ahead.
    pub inflight_window: usize,
    /// `None` runs unpartitioned on the base queues.
    pub partition: Option<PartitionPlan>,
    /// Route barriers onward by group, for a partitioned downstream stage.
    pub output_routing: Option<OutputRouting>,
    pub dedup_capacity: usize,
    pub metrics: Option<MetricsRegistry>,
    pub spans: Option<SpanLog>,
}

impl CollectorOptions {
    pub fn new(
        stage: impl Into<String>,
        input_queue: impl Into<String>,
        output_queue: impl Into<String>,
    ) -> Self {
        CollectorOptions {
            stage: stage.into(),
            input_queues: vec![input_queue.into()],
            output_queue: Some(output_queue.into()),
            strategy: StrategySpec::Match,
            registry: None,
            grouping_field: "block_num".to_string(),
            num_inputs: 1,
            collect_timeout: Duration::from_secs(30),
            emit_partial_on_timeout: true,
            inflight_window: 64,
            partition: None,
            output_routing: None,
            dedup_capacity: DEDUP_CAPACITY,
            metrics: None,
            spans: None,
        }
    }

    pub fn inputs(mut self, n: u64) -> Self {
        self.num_inputs = n;
        self
    }

    pub fn grouping(mut self, field: impl Into<String>) -> Self {
        self.grouping_field = field.into();
        self
    }

    pub fn strategy(mut self, spec: StrategySpec) -> Self {
        self.strategy = spec;
        self
    }

    pub fn timeout(mut self, d: Duration) -> Self {
        self.collect_timeout = d;
        self
    }

    pub fn partitioned(mut self, plan: PartitionPlan) -> Self {
        self.partition = Some(plan);
        self
    }

    pub fn join_also(mut self, queue: impl Into<String>) -> Self {
        self.input_queues.push(queue.into());
        self
    }

    pub fn window(mut self, n: usize) -> Self {
        self.inflight_window = n;
        self
    }
}

// ---------------------------------------------------------------------------
// Core state
// ---------------------------------------------------------------------------

struct Member {
    delivery: Delivery,
    consumer_idx: usize,
    task_key: String,
    receive_ctx: Option<TraceContext>,
}

struct GroupBuffer {
    members: Vec<Member>,
    contributed: HashSet<String>,
    /// Raw grouping value of the first member, echoed on the barrier.
    raw_value: Value,
    expected: u64,
    first_seen: Instant,
    postponed_until: Option<Instant>,
}

/// Lifetime totals for one collector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollectorStats {
    /// Members accepted into barriers.
    pub members: u64,
    /// Barriers emitted (partial flushes included).
    pub barriers: u64,
    /// Barriers emitted incomplete by the collect timeout.
    pub partial_flushes: u64,
    /// Duplicates acknowledged and dropped (redundant copies, post-barrier
    /// stragglers, post-barrier redeliveries).
    pub duplicate_drops: u64,
    /// Tasks rejected by validation (ungroupable or mis-routed).
    pub rejected: u64,
    /// Members a strategy refused via `Skip`.
    pub skipped: u64,
    /// Redeliveries of still-buffered messages (stored lease refreshed).
    pub lease_refreshes: u64,
    /// High-water mark of members buffered at once — the soft-state
    /// footprint. Bounded by the in-flight window, not by workload size.
    pub peak_buffered_members: u64,
    /// High-water mark of approximate buffered payload bytes.
    pub peak_buffered_bytes: u64,
}

/// What happened to buffered work when a collector wound down.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DrainOutcome {
    /// Barriers completed during the drain window.
    pub completed: u64,
    /// Groups abandoned incomplete, their members left unacknowledged for
    /// redelivery elsewhere.
    pub abandoned_groups: u64,
    pub abandoned_members: u64,
}

struct CollectorCounters {
    members: Option<Counter>,
    barriers: Option<Counter>,
    partial: Option<Counter>,
    duplicates: Option<Counter>,
    rejected_unroutable: Option<Counter>,
    rejected_misroute: Option<Counter>,
    skipped: Option<Counter>,
    refreshes: Option<Counter>,
    malformed_trace: Option<Counter>,
    group_seconds: Option<Histogram>,
    buffered: Option<Gauge>,
}

impl CollectorCounters {
    fn new(m: Option<&MetricsRegistry>, stage: &str) -> Self {
        let lbl = &[("stage", stage)];
        CollectorCounters {
            members: m.map(|m| m.counter("collector_members_total", lbl)),
            barriers: m.map(|m| m.counter("collector_barriers_total", lbl)),
            partial: m.map(|m| m.counter("collector_partial_flushes_total", lbl)),
            duplicates: m.map(|m| m.counter("collector_duplicate_drops_total", lbl)),
            rejected_unroutable: m.map(|m| {
                m.counter(
                    "collector_rejected_total",
                    &[("stage", stage), ("reason", "ungroupable")],
                )
            }),
            rejected_misroute: m.map(|m| {
                m.counter(
                    "collector_rejected_total",
                    &[("stage", stage), ("reason", "misroute")],
                )
            }),
            skipped: m.map(|m| m.counter("collector_skipped_total", lbl)),
            refreshes: m.map(|m| m.counter("collector_lease_refreshes_total", lbl)),
            malformed_trace: m.map(|m| m.counter("trace_malformed_total", &[("stage", stage)])),
            group_seconds: m.map(|m| m.histogram("collector_group_seconds", lbl)),
            buffered: m.map(|m| m.gauge("collector_buffered_members", lbl)),
        }
    }
}

fn bump(c: &Option<Counter>) {
    if let Some(c) = c {
        c.inc();
    }
}

/// A single collector: one engine, one thread (or drive it manually with
/// [`CollectorCore::poll`] in tests and simulations).
pub struct CollectorCore {
    bus: Bus,
    opts: CollectorOptions,
    strategy: Box<dyn CollectStrategy>,
    /// All consumers ever registered; rebalancing appends rather than
    /// replaces so members buffered under an older consumer can still be
    /// acknowledged through it.
    consumers: Vec<Consumer>,
    /// Indices of the consumers currently polled.
    active: Vec<usize>,
    groups: HashMap<GroupKey, GroupBuffer>,
    finished_groups: BoundedSet<GroupKey>,
    finished_tasks: BoundedSet<String>,
    /// Recent group completion times, for the drain grace heuristic.
    completion_ring: VecDeque<Duration>,
    routing_version: u64,
    counters: CollectorCounters,
    stats: CollectorStats,
    buffered_members: u64,
    buffered_bytes: u64,
    closed: bool,
}

impl CollectorCore {
    pub fn new(bus: &Bus, opts: CollectorOptions) -> Result<Self, CollectorError> {
        if opts.input_queues.is_empty() {
            return Err(CollectorError::Config("no input queues".to_string()));
        }
        let strategy = opts
            .strategy
            .build(&opts.grouping_field, opts.num_inputs, opts.registry.as_ref())
            .map_err(CollectorError::Config)?;
        if let (Some(out), None) = (&opts.output_queue, &opts.output_routing) {
            // Fail at construction, not at first barrier.
            bus.stream_state(out)?;
        }
        let counters = CollectorCounters::new(opts.metrics.as_ref(), &opts.stage);
        let routing_version = opts.partition.as_ref().map_or(0, |p| p.routing.version());
        let mut core = CollectorCore {
            bus: bus.clone(),
            strategy,
            consumers: Vec::new(),
            active: Vec::new(),
            groups: HashMap::new(),
            finished_groups: BoundedSet::new(opts.dedup_capacity),
            finished_tasks: BoundedSet::new(opts.dedup_capacity),
            completion_ring: VecDeque::new(),
            routing_version,
            counters,
            stats: CollectorStats::default(),
            buffered_members: 0,
            buffered_bytes: 0,
            closed: false,
            opts,
        };
        core.build_consumers()?;
        Ok(core)
    }

    pub fn stats(&self) -> CollectorStats {
        self.stats
    }

    fn buffer_grew(&mut self, bytes: u64) {
        self.buffered_members += 1;
        self.buffered_bytes += bytes;
        self.stats.peak_buffered_members =
            self.stats.peak_buffered_members.max(self.buffered_members);
        self.stats.peak_buffered_bytes = self.stats.peak_buffered_bytes.max(self.buffered_bytes);
        if let Some(g) = &self.counters.buffered {
            g.add(1);
        }
    }

    fn buffer_shrank(&mut self, members: u64, bytes: u64) {
        self.buffered_members = self.buffered_members.saturating_sub(members);
        self.buffered_bytes = self.buffered_bytes.saturating_sub(bytes);
        if let Some(g) = &self.counters.buffered {
            g.add(-(members as i64));
        }
    }

    pub fn buffered_groups(&self) -> usize {
        self.groups.len()
    }

    fn owned(&self) -> Option<Vec<u32>> {
        self.opts.partition.as_ref().map(|p| {
            owned_partitions(p.index, p.routing.original(), p.routing.active())
        })
    }

    fn build_consumers(&mut self) -> Result<(), CollectorError> {
        let owned = self.owned();
        let mut fresh = Vec::new();
        for q in &self.opts.input_queues {
            let mut handle = ConsumerHandle::new(q).inflight_window(self.opts.inflight_window);
            if let Some(parts) = &owned {
                for j in parts {
                    self.bus.ensure_queue(QueueConfig::new(partition_subject(q, *j)))?;
                }
                handle = handle.partitions(parts.clone());
            }
            fresh.push(self.bus.consumer(handle)?);
        }
        self.active.clear();
        for c in fresh {
            self.active.push(self.consumers.len());
            self.consumers.push(c);
        }
        Ok(())
    }

    /// React to fleet scaling. `false` means this collector no longer owns
    /// any partition and should drain and exit.
    pub fn survives_rebalance(&mut self) -> bool {
        let Some(plan) = &self.opts.partition else {
            return true;
        };
        let v = plan.routing.version();
        if v == self.routing_version {
            return true;
        }
        self.routing_version = v;
        match self.owned() {
            Some(parts) if parts.is_empty() => false,
            _ => self.build_consumers().is_ok(),
        }
    }

    /// One engine step: drain whatever is deliverable right now, then run
    /// timers. Returns true when any message arrived.
    pub fn poll(&mut self) -> bool {
        let mut progressed = false;
        let active = self.active.clone();
        for idx in active {
            loop {
                match self.consumers[idx].try_next() {
                    Ok(Some(d)) => {
                        self.ingest(idx, d);
                        progressed = true;
                    }
                    Ok(None) => break,
                    Err(BusError::Closed) => {
                        self.closed = true;
                        return progressed;
                    }
                    Err(_) => break,
                }
            }
        }
        self.tick();
        progressed
    }

    /// Drive until stopped (graceful: drains) or killed (abrupt: abandons
    /// everything unacknowledged, like a crash).
    pub fn run_until(
        &mut self,
        stop: &AtomicBool,
        kill: &AtomicBool,
    ) -> Option<DrainOutcome> {
        loop {
            if kill.load(Ordering::SeqCst) {
                return None;
            }
            if stop.load(Ordering::SeqCst) {
                break;
            }
            if !self.survives_rebalance() {
                break;
            }
            if self.closed {
                return None;
            }
            if !self.poll() {
                std::thread::sleep(Duration::from_millis(2));
            }
        }
        Some(self.drain(None))
    }

    // -- ingestion ----------------------------------------------------------

    fn ingest(&mut self, consumer_idx: usize, d: Delivery) {
        let payload = &d.envelope.payload;
        let base_queue = self.base_queue_of(consumer_idx);

        // Validation first: a task that cannot be grouped can never complete
        // a barrier, and retrying cannot fix its payload. Reject: ack, count,
        // keep it out of every aggregate.
        let group = match self.strategy.group_for(payload) {
            Ok(g) => g,
            Err(e) => {
                self.reject(consumer_idx, &d, &e);
                return;
            }
        };
        if !self.partition_plausible(&d.subject, &base_queue, group) {
            self.reject_misroute(consumer_idx, &d, group);
            return;
        }

        let task_key = match payload.task_id() {
            Some(t) => format!("{base_queue}|{t}"),
            None => format!("{base_queue}|anon:{}:{}", d.subject, d.envelope.message_id),
        };

        // A redelivery of a message still buffered: the stored lease is
        // stale (that's why it came back), so keep the fresh delivery and
        // ack nothing — this copy is still owed a barrier.
        if let Some(buf) = self.groups.get_mut(&group) {
            if let Some(m) = buf.members.iter_mut().find(|m| {
                m.delivery.subject == d.subject
                    && m.delivery.envelope.message_id == d.envelope.message_id
            }) {
                m.delivery = d;
                m.consumer_idx = consumer_idx;
                self.stats.lease_refreshes += 1;
                bump(&self.counters.refreshes);
                return;
            }
        }

        // Anything for an already-emitted group, or a copy of a task already
        // counted, is a duplicate: ack it and drop it.
        let late = self.finished_groups.contains(&group) || self.finished_tasks.contains(&task_key);
        let redundant = self
            .groups
            .get(&group)
            .is_some_and(|b| b.contributed.contains(&task_key));
        if late || redundant {
            let _ = self.consumers[consumer_idx].ack(&d);
            self.stats.duplicate_drops += 1;
            bump(&self.counters.duplicates);
            return;
        }

        // Accept.
        let receive_ctx = self.opts.spans.as_ref().map(|log| {
            let (mut span, _) = log.start_from_headers(
                "receive",
                &self.opts.stage,
                &d.envelope.headers,
                self.counters.malformed_trace.as_ref(),
            );
            span.set_attr("group", group.to_string());
            let ctx = span.ctx;
            span.finish();
            ctx
        });
        let raw_value = payload
            .get(&self.opts.grouping_field)
            .cloned()
            .unwrap_or(Value::Int(group as i64));
        let override_expected = payload.get_int("expected_inputs").and_then(|v| {
            if v > 0 {
                Some(v as u64)
            } else {
                None
            }
        });
        let default_expected = self.opts.num_inputs;
        let buf = self.groups.entry(group).or_insert_with(|| GroupBuffer {
            members: Vec::new(),
            contributed: HashSet::new(),
            raw_value,
            expected: default_expected,
            first_seen: Instant::now(),
            postponed_until: None,
        });
        if let Some(k) = override_expected {
            buf.expected = k;
        }
        buf.contributed.insert(task_key.clone());
        let approx = d.envelope.payload.approx_bytes() as u64;
        buf.members.push(Member {
            delivery: d,
            consumer_idx,
            task_key,
            receive_ctx,
        });
        self.stats.members += 1;
        bump(&self.counters.members);
        self.buffer_grew(approx);

        let op = assess(&mut self.strategy, &self.groups, group);
        self.apply(group, op);
    }

    fn base_queue_of(&self, consumer_idx: usize) -> String {
        // Consumers are built in input-queue order, appended per rebalance.
        let per_round = self.opts.input_queues.len();
        self.opts.input_queues[consumer_idx % per_round].clone()
    }

    /// A subject `<q>.p<j>` is plausible for a group when `j` matches the
    /// group's partition under either the original fleet size or the active
    /// one — during a scale-down both routings are momentarily in flight.
    fn partition_plausible(&self, subject: &str, base_queue: &str, group: GroupKey) -> bool {
        let Some(plan) = &self.opts.partition else {
            return true;
        };
        let Some(j) = parse_partition(subject, base_queue) else {
            return true; // delivered on the base queue itself
        };
        let orig = plan.routing.original();
        let active = plan.routing.active();
        crate::collector::partition::partition_for_key(group, orig) == j
            || crate::collector::partition::partition_for_key(group, active) == j
    }

    fn reject(&mut self, consumer_idx: usize, d: &Delivery, err: &KeyError) {
        let _ = self.consumers[consumer_idx].ack(d);
        self.stats.rejected += 1;
        bump(&self.counters.rejected_unroutable);
        if let Some(log) = &self.opts.spans {
            let (mut span, _) = log.start_from_headers(
                "reject",
                &self.opts.stage,
                &d.envelope.headers,
                self.counters.malformed_trace.as_ref(),
            );
            span.set_attr("reason", err.to_string());
        }
    }

    fn reject_misroute(&mut self, consumer_idx: usize, d: &Delivery, group: GroupKey) {
        let _ = self.consumers[consumer_idx].ack(d);
        self.stats.rejected += 1;
        bump(&self.counters.rejected_misroute);
        if let Some(log) = &self.opts.spans {
            let (mut span, _) = log.start_from_headers(
                "reject",
                &self.opts.stage,
                &d.envelope.headers,
                self.counters.malformed_trace.as_ref(),
            );
            span.set_attr("reason", format!("group {group} does not route to {}", d.subject));
        }
    }

    fn apply(&mut self, group: GroupKey, op: CollectorOperation) {
        match op {
            CollectorOperation::InProgress => {}
            CollectorOperation::Finished(groups) => {
                for g in groups {
                    self.emit(g, true);
                }
            }
            CollectorOperation::Postpone { delay } => {
                if let Some(buf) = self.groups.get_mut(&group) {
                    buf.postponed_until = Some(Instant::now() + delay);
                }
            }
            CollectorOperation::Skip => {
                let mut freed = None;
                if let Some(buf) = self.groups.get_mut(&group) {
                    if let Some(m) = buf.members.pop() {
                        buf.contributed.remove(&m.task_key);
                        let _ = self.consumers[m.consumer_idx].ack(&m.delivery);
                        self.stats.skipped += 1;
                        self.stats.members -= 1;
                        bump(&self.counters.skipped);
                        freed = Some(m.delivery.envelope.payload.approx_bytes() as u64);
                    }
                    if buf.members.is_empty() {
                        self.groups.remove(&group);
                    }
                }
                if let Some(bytes) = freed {
                    self.buffer_shrank(1, bytes);
                }
            }
        }
    }

    // -- timers -------------------------------------------------------------

    fn tick(&mut self) {
        let now = Instant::now();
        let due: Vec<GroupKey> = self
            .groups
            .iter()
            .filter(|(_, b)| b.postponed_until.is_some_and(|t| t <= now))
            .map(|(g, _)| *g)
            .collect();
        for g in due {
            if let Some(b) = self.groups.get_mut(&g) {
                b.postponed_until = None;
            }
            let op = assess(&mut self.strategy, &self.groups, g);
            self.apply(g, op);
        }
        if self.opts.emit_partial_on_timeout {
            let stale: Vec<GroupKey> = self
                .groups
                .iter()
                .filter(|(_, b)| now.duration_since(b.first_seen) >= self.opts.collect_timeout)
                .map(|(g, _)| *g)
                .collect();
            for g in stale {
                self.emit(g, false);
            }
        }
    }

    // -- emission -----------------------------------------------------------

    fn emit(&mut self, group: GroupKey, complete: bool) {
        let Some(buf) = self.groups.remove(&group) else {
            return;
        };
        let age = buf.first_seen.elapsed();
        let mut out = Payload::new();
        out.insert(self.opts.grouping_field.clone(), buf.raw_value.clone());
        out.insert("member_count", buf.members.len() as i64);
        out.insert("complete", complete);
        out.insert("task_id", format!("{}:g{}", self.opts.stage, group));
        if self.opts.grouping_field != "block_num" {
            if let Some(first) = buf.members.first() {
                if let Some(b) = first.delivery.envelope.payload.get("block_num") {
                    out.insert("block_num", b.clone());
                }
            }
        }
        out.insert(
            "members",
            Value::List(
                buf.members
                    .iter()
                    .map(|m| m.delivery.envelope.payload.clone().into())
                    .collect(),
            ),
        );

        if let Some(out_queue) = &self.opts.output_queue {
            let parent = buf.members.first().and_then(|m| m.receive_ctx);
            let spans = self.opts.spans.as_ref().map(|log| {
                let mut agg = log.start("aggregate", &self.opts.stage, parent.as_ref());
                agg.set_attr("group", group.to_string());
                agg.set_attr("member_count", buf.members.len().to_string());
                agg.set_attr("complete", complete.to_string());
                let send = log.start("send", &self.opts.stage, Some(&agg.ctx));
                (agg, send)
            });
            let mut headers = BTreeMap::new();
            if let Some((_, send)) = &spans {
                headers.insert(TRACEPARENT.to_string(), send.traceparent());
            }
            let subject = match &self.opts.output_routing {
                None => out_queue.clone(),
                Some(r) => match extract_group_key(&out, &r.grouping_field) {
                    Ok(key) => partition_subject(
                        out_queue,
                        crate::collector::partition::partition_for_key(key, r.num_partitions),
                    ),
                    Err(_) => out_queue.clone(),
                },
            };
            if self.bus.publish(&subject, out, headers).is_err() {
                // Nothing moved forward, so nothing may be acknowledged: put
                // the group back and let a later flush retry.
                self.groups.insert(group, buf);
                return;
            }
            if let Some((agg, send)) = spans {
                send.finish();
                agg.finish();
            }
        }

        for m in &buf.members {
            // A member whose lease lapsed mid-collection can't be acked; its
            // redelivery arrives for a finished group and is dropped there.
            let _ = self.consumers[m.consumer_idx].ack(&m.delivery);
        }
        let freed: u64 = buf
            .members
            .iter()
            .map(|m| m.delivery.envelope.payload.approx_bytes() as u64)
            .sum();
        self.buffer_shrank(buf.members.len() as u64, freed);
        self.finished_groups.insert(group);
        for m in &buf.members {
            self.finished_tasks.insert(m.task_key.clone());
        }
        if self.completion_ring.len() == 64 {
            self.completion_ring.pop_front();
        }
        self.completion_ring.push_back(age);
        self.stats.barriers += 1;
        bump(&self.counters.barriers);
        if !complete {
            self.stats.partial_flushes += 1;
            bump(&self.counters.partial);
        }
        if let Some(h) = &self.counters.group_seconds {
            h.observe_duration(age);
        }
        self.strategy.committed(group);
    }

    // -- wind-down ----------------------------------------------------------

    /// Grace to wait before abandoning buffered groups: twice the rolling
    /// P95 completion time, or twice the collect timeout before any group
    /// has completed.
    fn default_grace(&self) -> Duration {
        if self.completion_ring.is_empty() {
            return self.opts.collect_timeout * 2;
        }
        let mut v: Vec<Duration> = self.completion_ring.iter().copied().collect();
        v.sort();
        let idx = ((v.len() as f64 * 0.95).ceil() as usize).clamp(1, v.len()) - 1;
        v[idx] * 2
    }

    /// Stop taking on new groups' worth of waiting: keep collecting for the
    /// grace window, then abandon whatever is still incomplete — members
    /// unacknowledged, so they redeliver and re-form elsewhere.
    pub fn drain(&mut self, grace: Option<Duration>) -> DrainOutcome {
        let barriers_before = self.stats.barriers;
        let deadline = Instant::now() + grace.unwrap_or_else(|| self.default_grace());
        while Instant::now() < deadline && !self.groups.is_empty() && !self.closed {
            if !self.poll() {
                std::thread::sleep(Duration::from_millis(2));
            }
        }
        let abandoned_groups = self.groups.len() as u64;
        let abandoned_members = self.groups.values().map(|b| b.members.len() as u64).sum();
        self.groups.clear();
        let bytes = self.buffered_bytes;
        self.buffer_shrank(abandoned_members, bytes);
        DrainOutcome {
            completed: self.stats.barriers - barriers_before,
            abandoned_groups,
            abandoned_members,
        }
    }
}

/// Split-borrow helper: the strategy (mutable) assesses a group (immutable)
/// without fighting over `self`.
fn assess(
    strategy: &mut Box<dyn CollectStrategy>,
    groups: &HashMap<GroupKey, GroupBuffer>,
    group: GroupKey,
) -> CollectorOperation {
    let Some(buf) = groups.get(&group) else {
        return CollectorOperation::InProgress;
    };
    let view = GroupView {
        group,
        members: buf
            .members
            .iter()
            .map(|m| &m.delivery.envelope.payload)
            .collect(),
        expected: buf.expected,
        age: buf.first_seen.elapsed(),
    };
    strategy.assess(&view)
}

fn parse_partition(subject: &str, base_queue: &str) -> Option<u32> {
    subject
        .strip_prefix(base_queue)?
        .strip_prefix(".p")?
        .parse()
        .ok()
}

// ---------------------------------------------------------------------------
// Thread wrapper
// ---------------------------------------------------------------------------

/// A collector running on its own thread.
pub struct CollectorHandle {
    stop: Arc<AtomicBool>,
    kill: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<(CollectorStats, Option<DrainOutcome>)>>,
}

impl CollectorHandle {
    /// Graceful wind-down: drain, then exit.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Crash simulation: exit immediately, abandoning all buffered members
    /// unacknowledged.
    pub fn kill(&self) {
        self.kill.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().map(|t| t.is_finished()).unwrap_or(true)
    }

    pub fn join(mut self) -> (CollectorStats, Option<DrainOutcome>) {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_default(),
            None => Default::default(),
        }
    }

    pub fn shutdown(self) -> (CollectorStats, Option<DrainOutcome>) {
        self.stop();
        self.join()
    }
}

/// Build the core (reporting configuration errors synchronously), then run
/// it on a named thread.
pub fn spawn_collector(
    bus: &Bus,
    opts: CollectorOptions,
) -> Result<CollectorHandle, CollectorError> {
    let name = format!("collect-{}", opts.stage);
    let mut core = CollectorCore::new(bus, opts)?;
    let stop = Arc::new(AtomicBool::new(false));
    let kill = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let kill2 = kill.clone();
    let thread = std::thread::Builder::new()
        .name(name)
        .spawn(move || {
            let outcome = core.run_until(&stop2, &kill2);
            (core.stats(), outcome)
        })
        .expect("failed to spawn collector thread");
    Ok(CollectorHandle {
        stop,
        kill,
        thread: Some(thread),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::BusOptions;

    fn manual_bus() -> Bus {
        Bus::open(
            BusOptions::in_memory()
                .manual_sweep()
                .ack_timeout(Duration::from_millis(80)),
        )
        .unwrap()
    }

    fn task(block: i64, idx: i64) -> Payload {
        Payload::new()
            .with("block_num", block)
            .with("task_index", idx)
            .with("task_id", format!("b{block}-t{idx}"))
    }

    fn publish(bus: &Bus, queue: &str, p: Payload) {
        bus.publish(queue, p, BTreeMap::new()).unwrap();
    }

    fn core_on(bus: &Bus, k: u64) -> CollectorCore {
        bus.create_queue(QueueConfig::new("proofs")).unwrap();
        bus.create_queue(QueueConfig::new("agg")).unwrap();
        CollectorCore::new(bus, CollectorOptions::new("agg", "proofs", "agg").inputs(k)).unwrap()
    }

    fn poll_n(core: &mut CollectorCore, n: usize) {
        for _ in 0..n {
            core.poll();
        }
    }

    #[test]
    fn bounded_set_evicts_oldest_first() {
        let mut s: BoundedSet<u32> = BoundedSet::new(3);
        assert!(s.insert(1));
        assert!(!s.insert(1), "duplicate insert reports seen");
        assert!(s.insert(2));
        assert!(s.insert(3));
        assert!(s.insert(4)); // evicts 1
        assert_eq!(s.len(), 3);
        assert!(!s.contains(&1));
        assert!(s.contains(&2) && s.contains(&3) && s.contains(&4));
    }

    #[test]
    fn barrier_forms_at_k_and_members_are_acked() {
        let bus = manual_bus();
        let mut core = core_on(&bus, 3);
        for i in 0..3 {
            publish(&bus, "proofs", task(7, i));
        }
        poll_n(&mut core, 3);
        assert_eq!(core.stats().barriers, 1);
        assert_eq!(bus.stream_state("proofs").unwrap().depth, 0, "members acked");
        let c = bus.consumer(ConsumerHandle::new("agg").group("check")).unwrap();
        let d = c.try_next().unwrap().unwrap();
        let out = &d.envelope.payload;
        assert_eq!(out.get_int("block_num"), Some(7));
        assert_eq!(out.get_int("member_count"), Some(3));
        assert_eq!(out.get_bool("complete"), Some(true));
        assert_eq!(out.task_id(), Some("agg:g7"));
        match out.get("members") {
            Some(Value::List(ms)) => assert_eq!(ms.len(), 3),
            other => panic!("expected member list, got {other:?}"),
        }
    }

    #[test]
    fn groups_complete_independently() {
        let bus = manual_bus();
        let mut core = core_on(&bus, 2);
        publish(&bus, "proofs", task(1, 0));
        publish(&bus, "proofs", task(2, 0));
        publish(&bus, "proofs", task(2, 1));
        poll_n(&mut core, 3);
        assert_eq!(core.stats().barriers, 1, "only block 2 is complete");
        assert_eq!(core.buffered_groups(), 1);
        publish(&bus, "proofs", task(1, 1));
        poll_n(&mut core, 2);
        assert_eq!(core.stats().barriers, 2);
        assert_eq!(core.buffered_groups(), 0);
    }

    #[test]
    fn payload_override_shrinks_the_expected_count() {
        let bus = manual_bus();
        let mut core = core_on(&bus, 5);
        publish(&bus, "proofs", task(3, 0).with("expected_inputs", 2i64));
        publish(&bus, "proofs", task(3, 1));
        poll_n(&mut core, 2);
        assert_eq!(core.stats().barriers, 1, "override of 2 beat the configured 5");
    }

    #[test]
    fn redundant_task_copy_is_acked_and_dropped() {
        let bus = manual_bus();
        let mut core = core_on(&bus, 2);
        publish(&bus, "proofs", task(4, 0));
        publish(&bus, "proofs", task(4, 0)); // speculative duplicate, same task_id
        publish(&bus, "proofs", task(4, 1));
        poll_n(&mut core, 3);
        let stats = core.stats();
        assert_eq!(stats.barriers, 1);
        assert_eq!(stats.duplicate_drops, 1);
        assert_eq!(stats.members, 2, "barrier held two distinct contributions");
        assert_eq!(bus.stream_state("proofs").unwrap().depth, 0, "duplicate acked too");
    }

    #[test]
    fn stragglers_after_the_barrier_are_dropped() {
        let bus = manual_bus();
        let mut core = core_on(&bus, 2);
        publish(&bus, "proofs", task(9, 0));
        publish(&bus, "proofs", task(9, 1));
        poll_n(&mut core, 2);
        assert_eq!(core.stats().barriers, 1);
        // A late copy of a member, and a brand-new task for the closed group.
        publish(&bus, "proofs", task(9, 0));
        publish(&bus, "proofs", task(9, 7));
        poll_n(&mut core, 2);
        let stats = core.stats();
        assert_eq!(stats.barriers, 1, "no second barrier");
        assert_eq!(stats.duplicate_drops, 2);
        assert_eq!(bus.stream_state("proofs").unwrap().depth, 0);
    }

    #[test]
    fn redelivery_of_a_buffered_member_refreshes_its_lease() {
        let bus = manual_bus();
        let mut core = core_on(&bus, 2);
        publish(&bus, "proofs", task(5, 0));
        core.poll();
        assert_eq!(core.buffered_groups(), 1);
        // Let the lease lapse and sweep: the same message comes back while
        // its group is still open.
        std::thread::sleep(Duration::from_millis(100));
        assert_eq!(bus.redelivery_sweep(), 1);
        core.poll();
        let stats = core.stats();
        assert_eq!(stats.lease_refreshes, 1);
        assert_eq!(stats.duplicate_drops, 0, "not a duplicate — same message");
        // Completing the group must ack cleanly via the refreshed lease.
        publish(&bus, "proofs", task(5, 1));
        core.poll();
        assert_eq!(core.stats().barriers, 1);
        assert_eq!(bus.stream_state("proofs").unwrap().depth, 0);
        assert_eq!(bus.stream_state("proofs").unwrap().inflight, 0);
    }

    #[test]
    fn ungroupable_tasks_are_rejected_not_aggregated() {
        let bus = manual_bus();
        let mut core = core_on(&bus, 2);
        publish(&bus, "proofs", Payload::new().with("task_id", "no-block"));
        publish(&bus, "proofs", Payload::new().with("block_num", true).with("task_id", "bool"));
        publish(&bus, "proofs", task(6, 0));
        publish(&bus, "proofs", task(6, 1));
        poll_n(&mut core, 4);
        let stats = core.stats();
        assert_eq!(stats.rejected, 2);
        assert_eq!(stats.barriers, 1);
        assert_eq!(stats.members, 2, "rejects never became members");
        assert_eq!(bus.stream_state("proofs").unwrap().depth, 0, "rejects were acked");
    }

    #[test]
    fn timeout_flushes_a_partial_barrier() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("proofs")).unwrap();
        bus.create_queue(QueueConfig::new("agg")).unwrap();
        let mut core = CollectorCore::new(
            &bus,
            CollectorOptions::new("agg", "proofs", "agg")
                .inputs(3)
                .timeout(Duration::from_millis(60)),
        )
        .unwrap();
        publish(&bus, "proofs", task(2, 0));
        publish(&bus, "proofs", task(2, 1));
        poll_n(&mut core, 2);
        assert_eq!(core.stats().barriers, 0);
        std::thread::sleep(Duration::from_millis(80));
        core.poll();
        let stats = core.stats();
        assert_eq!(stats.barriers, 1);
        assert_eq!(stats.partial_flushes, 1);
        let c = bus.consumer(ConsumerHandle::new("agg").group("check")).unwrap();
        let out = c.try_next().unwrap().unwrap().envelope.payload;
        assert_eq!(out.get_bool("complete"), Some(false));
        assert_eq!(out.get_int("member_count"), Some(2));
    }

    #[test]
    fn sequential_windows_collapse_consecutive_blocks() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("proofs")).unwrap();
        bus.create_queue(QueueConfig::new("spans_out")).unwrap();
        let mut core = CollectorCore::new(
            &bus,
            CollectorOptions::new("window", "proofs", "spans_out")
                .strategy(StrategySpec::Sequential)
                .inputs(3),
        )
        .unwrap();
        for b in [1, 0, 2, 5, 3, 4] {
            publish(&bus, "proofs", task(b, 0));
        }
        poll_n(&mut core, 6);
        assert_eq!(core.stats().barriers, 2, "windows 0..3 and 3..6");
        assert_eq!(bus.stream_state("proofs").unwrap().depth, 0);
    }

    #[test]
    fn cross_queue_join_counts_contributions_per_queue() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("thin_proofs")).unwrap();
        bus.create_queue(QueueConfig::new("batches")).unwrap();
        bus.create_queue(QueueConfig::new("joined")).unwrap();
        let mut core = CollectorCore::new(
            &bus,
            CollectorOptions::new("join", "thin_proofs", "joined")
                .join_also("batches")
                .inputs(3),
        )
        .unwrap();
        // The same task_id on both queues is two distinct contributions.
        publish(&bus, "thin_proofs", task(1, 0));
        publish(&bus, "thin_proofs", task(1, 1));
        publish(&bus, "batches", task(1, 0));
        poll_n(&mut core, 3);
        assert_eq!(core.stats().barriers, 1);
        assert_eq!(core.stats().duplicate_drops, 0);
        assert_eq!(bus.stream_state("thin_proofs").unwrap().depth, 0);
        assert_eq!(bus.stream_state("batches").unwrap().depth, 0);
    }

    #[test]
    fn partitioned_fleet_is_affine_and_rejects_misroutes() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("proofs")).unwrap();
        bus.create_queue(QueueConfig::new("agg")).unwrap();
        let routing = Arc::new(RoutingState::new(2));
        let mut cores: Vec<CollectorCore> = (0..2)
            .map(|i| {
                CollectorCore::new(
                    &bus,
                    CollectorOptions::new("agg", "proofs", "agg")
                        .inputs(2)
                        .partitioned(PartitionPlan {
                            index: i,
                            routing: routing.clone(),
                        }),
                )
                .unwrap()
            })
            .collect();
        // Properly routed members: block 4 → p0, block 5 → p1.
        publish(&bus, "proofs.p0", task(4, 0));
        publish(&bus, "proofs.p0", task(4, 1));
        publish(&bus, "proofs.p1", task(5, 0));
        publish(&bus, "proofs.p1", task(5, 1));
        // And one mis-route: block 4 on partition 1.
        publish(&bus, "proofs.p1", task(4, 9));
        for _ in 0..4 {
            cores[0].poll();
            cores[1].poll();
        }
        assert_eq!(cores[0].stats().barriers, 1);
        assert_eq!(cores[1].stats().barriers, 1);
        assert_eq!(cores[0].stats().rejected, 0);
        assert_eq!(cores[1].stats().rejected, 1, "mis-route bounced at p1");
        assert_eq!(bus.stream_state("proofs.p0").unwrap().depth, 0);
        assert_eq!(bus.stream_state("proofs.p1").unwrap().depth, 0);
    }

    #[test]
    fn scale_down_survivor_takes_over_and_retiree_drains() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("proofs")).unwrap();
        bus.create_queue(QueueConfig::new("agg")).unwrap();
        let routing = Arc::new(RoutingState::new(2));
        let plan = |i| PartitionPlan {
            index: i,
            routing: routing.clone(),
        };
        let mut survivor = CollectorCore::new(
            &bus,
            CollectorOptions::new("agg", "proofs", "agg").inputs(2).partitioned(plan(0)),
        )
        .unwrap();
        let mut retiree = CollectorCore::new(
            &bus,
            CollectorOptions::new("agg", "proofs", "agg").inputs(2).partitioned(plan(1)),
        )
        .unwrap();
        // Half a group lands on the retiree...
        publish(&bus, "proofs.p1", task(5, 0));
        retiree.poll();
        assert_eq!(retiree.buffered_groups(), 1);
        // ...then the fleet shrinks to one.
        routing.scale_to(1);
        assert!(survivor.survives_rebalance(), "index 0 keeps serving");
        assert!(!retiree.survives_rebalance(), "index 1 is retired");
        let outcome = retiree.drain(Some(Duration::from_millis(30)));
        assert_eq!(outcome.abandoned_groups, 1);
        assert_eq!(outcome.abandoned_members, 1);
        // The abandoned member's lease lapses and redelivers to the survivor,
        // which now owns p1; the second member arrives on p1 as well (5 mod 1
        // routes everything to p0 under the new map, but in-flight producers
        // may still use the old one — both are accepted).
        std::thread::sleep(Duration::from_millis(100));
        bus.redelivery_sweep();
        publish(&bus, "proofs.p1", task(5, 1));
        poll_n(&mut survivor, 4);
        assert_eq!(survivor.stats().barriers, 1, "group re-formed on the survivor");
        assert_eq!(bus.stream_state("proofs.p1").unwrap().depth, 0);
    }

    #[test]
    fn graceful_drain_finishes_what_it_can() {
        let bus = manual_bus();
        let mut core = core_on(&bus, 2);
        publish(&bus, "proofs", task(1, 0));
        publish(&bus, "proofs", task(1, 1));
        publish(&bus, "proofs", task(2, 0)); // incomplete forever
        poll_n(&mut core, 3);
        assert_eq!(core.stats().barriers, 1);
        let outcome = core.drain(Some(Duration::from_millis(40)));
        assert_eq!(outcome.completed, 0);
        assert_eq!(outcome.abandoned_groups, 1);
        assert_eq!(outcome.abandoned_members, 1);
        // The abandoned member is still claimed (unacked), not lost.
        assert_eq!(bus.stream_state("proofs").unwrap().inflight, 1);
    }

    #[test]
    fn spawned_collector_runs_and_stops() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("proofs")).unwrap();
        bus.create_queue(QueueConfig::new("agg")).unwrap();
        let h = spawn_collector(
            &bus,
            CollectorOptions::new("agg", "proofs", "agg").inputs(2),
        )
        .unwrap();
        publish(&bus, "proofs", task(1, 0));
        publish(&bus, "proofs", task(1, 1));
        let end = Instant::now() + Duration::from_secs(3);
        while Instant::now() < end && bus.stream_state("agg").unwrap().depth == 0 {
            std::thread::sleep(Duration::from_millis(5));
        }
        assert_eq!(bus.stream_state("agg").unwrap().depth, 1);
        let (stats, outcome) = h.shutdown();
        assert_eq!(stats.barriers, 1);
        assert!(outcome.is_some(), "graceful stop drains");
    }

    #[test]
    fn killed_collector_abandons_members_for_redelivery() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("proofs")).unwrap();
        bus.create_queue(QueueConfig::new("agg")).unwrap();
        let h = spawn_collector(
            &bus,
            CollectorOptions::new("agg", "proofs", "agg").inputs(2),
        )
        .unwrap();
        publish(&bus, "proofs", task(3, 0));
        let end = Instant::now() + Duration::from_secs(3);
        while Instant::now() < end && bus.stream_state("proofs").unwrap().depth > 0 {
            std::thread::sleep(Duration::from_millis(5));
        }
        h.kill();
        let (stats, outcome) = {
            let h = h;
            h.join()
        };
        assert_eq!(stats.members, 1);
        assert!(outcome.is_none(), "a kill never drains");
        assert_eq!(bus.stream_state("proofs").unwrap().inflight, 1, "member still claimed");
        // After the lease lapses the member redelivers to a fresh collector.
        std::thread::sleep(Duration::from_millis(100));
        bus.redelivery_sweep();
        let mut replacement = CollectorCore::new(
            &bus,
            CollectorOptions::new("agg", "proofs", "agg").inputs(2),
        )
        .unwrap();
        publish(&bus, "proofs", task(3, 1));
        poll_n(&mut replacement, 3);
        assert_eq!(replacement.stats().barriers, 1);
    }

    #[test]
    fn ordered_commit_strategy_emits_in_group_order() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("proofs")).unwrap();
        bus.create_queue(QueueConfig::new("final")).unwrap();
        let registry = StrategyRegistry::new();
        registry.register("ordered_commit", || {
            Box::new(crate::collector::strategy::OrderedCommitStrategy::new("block_num", 0))
        });
        let mut opts = CollectorOptions::new("final", "proofs", "final")
            .strategy(StrategySpec::parse("ordered_commit"))
            .inputs(1);
        opts.registry = Some(registry);
        let mut core = CollectorCore::new(&bus, opts).unwrap();
        // Blocks complete out of order: 1, 2, then 0.
        publish(&bus, "proofs", task(1, 0));
        publish(&bus, "proofs", task(2, 0));
        poll_n(&mut core, 2);
        assert_eq!(core.stats().barriers, 0, "held for block 0");
        publish(&bus, "proofs", task(0, 0));
        poll_n(&mut core, 2);
        assert_eq!(core.stats().barriers, 3, "the whole run released");
        let c = bus.consumer(ConsumerHandle::new("final").group("check")).unwrap();
        let emitted: Vec<i64> = std::iter::from_fn(|| {
            c.try_next().unwrap().map(|d| {
                c.ack(&d).unwrap();
                d.envelope.payload.get_int("block_num").unwrap()
            })
        })
        .collect();
        assert_eq!(emitted, vec![0, 1, 2], "commit order is block order");
    }
}
