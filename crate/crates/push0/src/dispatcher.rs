//! Stateless dispatch workers.
//!
//! A dispatcher is a loop: claim the next task from an input queue, execute
//! it, publish the result downstream, then acknowledge the input. The order
//! is what matters — the ack happens only after the result is durably
//! published, so a worker lost at any point leaves the task claimed until
//! its lease expires and another worker repeats it. Dispatchers keep no
//! state between tasks; any number of replicas can serve one queue, and
//! replicas can come and go freely.
//!
//! Repetition is made cheap rather than prevented: an optional result store
//! remembers finished `task_id`s (with a digest of their output), so a
//! redelivered task whose result already went out is acknowledged without
//! proving again. Downstream collectors drop whatever duplicates remain.
//!
//! Fault injection is built in because crash behavior is part of the
//! contract, not an afterthought: a worker can be told to die at pickup,
//! after execution but before publishing, or between publish and ack — the
//! three windows with observably different recovery behavior.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::bus::{Bus, BusError, Consumer, ConsumerHandle};
use crate::collector::{partition_for_key, partition_subject};
use crate::executor::{ExecutionContext, TaskExecutor};
use crate::metrics::MetricsRegistry;
use crate::model::extract_group_key;
use crate::payload::Payload;
use crate::trace::{SpanLog, TRACEPARENT};

/// Fields copied from the input payload into the output when the executor
/// did not set them itself: ordering, identity, and barrier bookkeeping must
/// survive provers that only emit their proof.
pub const DEFAULT_CARRY_FIELDS: &[&str] =
    &["block_num", "task_id", "expected_inputs", "task_index"];

// ---------------------------------------------------------------------------
// Result store (idempotency)
// ---------------------------------------------------------------------------

struct ResultStoreInner {
    map: Mutex<HashMap<String, String>>,
    file: Mutex<Option<File>>,
}

/// Completed-task memory shared by the workers of a stage: `task_id` → hex
/// digest of the published output. Durable stores append
/// `task_id<TAB>digest` lines, fsynced per record, and replay on open — a
/// worker fleet restarted after a crash still skips everything it already
/// published.
#[derive(Clone)]
pub struct ResultStore {
    inner: Arc<ResultStoreInner>,
}

impl ResultStore {
    pub fn in_memory() -> Self {
        ResultStore {
            inner: Arc::new(ResultStoreInner {
                map: Mutex::new(HashMap::new()),
                file: Mutex::new(None),
            }),
        }
    }

    pub fn durable(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut map = HashMap::new();
        if path.exists() {
            for line in std::fs::read_to_string(path)?.lines() {
                if let Some((task, digest)) = line.split_once('\t') {
                    map.insert(task.to_string(), digest.to_string());
                }
            }
        }
        let file = File::options().create(true).append(true).open(path)?;
        Ok(ResultStore {
            inner: Arc::new(ResultStoreInner {
                map: Mutex::new(map),
                file: Mutex::new(Some(file)),
            }),
        })
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.inner.map.lock().contains_key(task_id)
    }

    pub fn digest(&self, task_id: &str) -> Option<String> {
        self.inner.map.lock().get(task_id).cloned()
    }

    /// Record a completed task. First write wins; recording an already-known
    /// task is a no-op (the earlier result is the one downstream saw).
    pub fn record(&self, task_id: &str, digest: &str) -> std::io::Result<()> {
        {
            let mut map = self.inner.map.lock();
            if map.contains_key(task_id) {
                return Ok(());
            }
            map.insert(task_id.to_string(), digest.to_string());
        }
        let mut file = self.inner.file.lock();
        if let Some(f) = file.as_mut() {
            writeln!(f, "{task_id}\t{digest}")?;
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.map.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Fault injection
// ---------------------------------------------------------------------------

/// Shared crash trigger. One switch can arm any number of worker faults —
/// flipping it kills the whole fleet at once.
#[derive(Clone, Default)]
pub struct KillSwitch(Arc<AtomicBool>);

impl KillSwitch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn armed(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Where in the task cycle an armed worker dies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultSite {
    /// Right after claiming a task: the lease is held but nothing ran.
    OnPickup,
    /// After execution, before the result is published: work is lost and
    /// repeated elsewhere.
    BeforePublish,
    /// After publishing, before the ack: the repeat produces a duplicate
    /// downstream.
    AfterPublish,
}

/// A worker's crash plan: die at `site` once `switch` flips. The heartbeat
/// hook sends one final lease extension at the moment it first observes the
/// armed switch and then goes silent — modelling the last heartbeat that
/// reached the bus before the process died — so recovery time is measured
/// from a full ack window after that instant.
#[derive(Clone)]
pub struct Fault {
    pub site: FaultSite,
    switch: KillSwitch,
    silenced: Arc<AtomicBool>,
}

impl Fault {
    pub fn new(site: FaultSite, switch: KillSwitch) -> Self {
        Fault {
            site,
            switch,
            silenced: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn armed(&self) -> bool {
        self.switch.armed()
    }

    /// Whether the heartbeat hook may still extend the lease (true exactly
    /// once after arming).
    fn allow_heartbeat(&self) -> bool {
        if !self.armed() {
            return true;
        }
        !self.silenced.swap(true, Ordering::SeqCst)
    }
}

// ---------------------------------------------------------------------------
// Dispatcher
// ---------------------------------------------------------------------------

/// How a dispatcher's output is addressed.
#[derive(Debug, Clone)]
pub struct OutputRouting {
    /// Payload field whose value picks the partition.
    pub grouping_field: String,
    /// Partition count of the downstream collector fleet.
    pub num_partitions: u32,
}

pub struct DispatcherOptions {
    /// Stage label for metrics and spans.
    pub stage: String,
    pub input_queue: String,
    /// Where results go. `None` makes this a terminal consumer that executes
    /// and acks without publishing.
    pub output_queue: Option<String>,
    /// Defaults to the input queue name (all replicas share one group).
    pub worker_group: Option<String>,
    pub executor: Arc<dyn TaskExecutor>,
    /// Concurrent leases per worker. Dispatchers default to 1: one expensive
    /// task at a time.
    pub max_inflight: usize,
    pub result_store: Option<ResultStore>,
    /// When set, outputs go to `<output_queue>.p<partition>` instead of the
    /// base queue.
    pub routing: Option<OutputRouting>,
    pub carry_fields: Vec<String>,
    pub fault: Option<Fault>,
    pub metrics: Option<MetricsRegistry>,
    pub spans: Option<SpanLog>,
}

impl DispatcherOptions {
    pub fn new(
        stage: impl Into<String>,
        input_queue: impl Into<String>,
        output_queue: impl Into<String>,
        executor: Arc<dyn TaskExecutor>,
    ) -> Self {
        DispatcherOptions {
            stage: stage.into(),
            input_queue: input_queue.into(),
            output_queue: Some(output_queue.into()),
            worker_group: None,
            executor,
            max_inflight: 1,
            result_store: None,
            routing: None,
            carry_fields: DEFAULT_CARRY_FIELDS.iter().map(|s| s.to_string()).collect(),
            fault: None,
            metrics: None,
            spans: None,
        }
    }
}

/// Final tally of one worker's run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DispatcherStats {
    /// Tasks executed, published, and acked.
    pub processed: u64,
    /// Execution failures left unacked for redelivery.
    pub failures: u64,
    /// Redeliveries skipped because the result store already had them.
    pub idempotent_skips: u64,
    /// True when an injected fault ended the run.
    pub died_by_fault: bool,
}

/// A running dispatcher worker.
pub struct DispatcherHandle {
    stop: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<DispatcherStats>>,
}

impl DispatcherHandle {
    /// Ask the worker to finish its current task and exit.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().map(|t| t.is_finished()).unwrap_or(true)
    }

    pub fn join(mut self) -> DispatcherStats {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_default(),
            None => DispatcherStats::default(),
        }
    }

    /// `stop()` and wait.
    pub fn shutdown(self) -> DispatcherStats {
        self.stop();
        self.join()
    }
}

/// Register a consumer and start one worker thread. Spawn this N times for
/// N replicas — they share the input queue's worker group.
pub fn spawn_dispatcher(bus: &Bus, opts: DispatcherOptions) -> Result<DispatcherHandle, BusError> {
    let group = opts
        .worker_group
        .clone()
        .unwrap_or_else(|| opts.input_queue.clone());
    let consumer = bus.consumer(
        ConsumerHandle::new(&opts.input_queue)
            .group(group)
            .inflight_window(opts.max_inflight),
    )?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let bus = bus.clone();
    let thread = std::thread::Builder::new()
        .name(format!("dispatch-{}", opts.stage))
        .spawn(move || run_worker(bus, consumer, opts, stop2))
        .expect("failed to spawn dispatcher thread");
    Ok(DispatcherHandle {
        stop,
        thread: Some(thread),
    })
}

fn run_worker(
    bus: Bus,
    consumer: Consumer,
    opts: DispatcherOptions,
    stop: Arc<AtomicBool>,
) -> DispatcherStats {
    let mut stats = DispatcherStats::default();
    let stage: &str = &opts.stage;
    let m = opts.metrics.as_ref();
    let tasks_total = m.map(|m| m.counter("dispatcher_tasks_total", &[("stage", stage)]));
    let failures_total = m.map(|m| m.counter("dispatcher_failures_total", &[("stage", stage)]));
    let skips_total =
        m.map(|m| m.counter("dispatcher_idempotent_skips_total", &[("stage", stage)]));
    let route_errors_total =
        m.map(|m| m.counter("dispatcher_route_errors_total", &[("stage", stage)]));
    let malformed_total = m.map(|m| m.counter("trace_malformed_total", &[("stage", stage)]));
    let task_seconds = m.map(|m| m.histogram("dispatcher_task_seconds", &[("stage", stage)]));
    let cycle_seconds = m.map(|m| m.histogram("dispatcher_cycle_seconds", &[("stage", stage)]));

    loop {
        if stop.load(Ordering::SeqCst) {
            return stats;
        }
        if opts.fault.as_ref().is_some_and(|f| f.armed()) {
            // Armed while idle (or before claiming more work): die cleanly.
            stats.died_by_fault = true;
            return stats;
        }
        let delivery = match consumer.next_timeout(Duration::from_millis(50)) {
            Ok(Some(d)) => d,
            Ok(None) => continue,
            Err(BusError::Closed) => return stats,
            Err(_) => continue,
        };
        let picked_up = Instant::now();
        let input = &delivery.envelope.payload;
        let task_id = input.task_id().map(|s| s.to_string());

        // Spans: receive covers the whole cycle; execute and publish are its
        // children so one trace shows where the time went.
        let mut receive_span = opts.spans.as_ref().map(|log| {
            let (mut span, _outcome) = log.start_from_headers(
                "receive",
                stage,
                &delivery.envelope.headers,
                malformed_total.as_ref(),
            );
            if let Some(t) = &task_id {
                span.set_attr("task_id", t.clone());
            }
            span.set_attr("retry", delivery.envelope.retry_count.to_string());
            span
        });
        let receive_ctx = receive_span.as_ref().map(|s| s.ctx);

        if let Some(f) = &opts.fault {
            if f.armed() && f.site == FaultSite::OnPickup {
                stats.died_by_fault = true;
                return stats; // lease held, nothing ran — a crash at claim time
            }
        }

        // Idempotency: a redelivered task whose result already went out is
        // acked without executing again.
        if let (Some(store), Some(tid)) = (&opts.result_store, &task_id) {
            if store.contains(tid) {
                stats.idempotent_skips += 1;
                if let Some(c) = &skips_total {
                    c.inc();
                }
                if let Some(span) = receive_span.as_mut() {
                    span.set_attr("skipped", "result_already_published");
                }
                let _ = consumer.ack(&delivery);
                continue;
            }
        }

        let exec_started = Instant::now();
        let fault = opts.fault.clone();
        let hb_consumer = &consumer;
        let hb_delivery = &delivery;
        let heartbeat = move || {
            if fault.as_ref().is_none_or(|f| f.allow_heartbeat()) {
                let _ = hb_consumer.heartbeat(hb_delivery);
            }
        };
        let ctx = ExecutionContext {
            heartbeat: &heartbeat,
            attempt: delivery.envelope.retry_count,
            task_id: task_id.as_deref(),
        };
        let exec_span = opts
            .spans
            .as_ref()
            .map(|log| log.start("execute", stage, receive_ctx.as_ref()));
        let result = opts.executor.execute(input, &ctx);
        if let Some(s) = exec_span {
            s.finish();
        }
        if let Some(h) = &task_seconds {
            h.observe_duration(exec_started.elapsed());
        }

        let mut output = match result {
            Ok(p) => p,
            Err(e) => {
                // Leave the delivery unacked: the lease expires, the task is
                // retried, and the retry budget eventually dead-letters it.
                stats.failures += 1;
                if let Some(c) = &failures_total {
                    c.inc();
                }
                if let Some(span) = receive_span.as_mut() {
                    span.set_attr("error", e.to_string());
                }
                if opts.fault.as_ref().is_some_and(|f| f.armed()) {
                    stats.died_by_fault = true;
                    return stats;
                }
                continue;
            }
        };

        if let Some(f) = &opts.fault {
            if f.armed() && f.site == FaultSite::BeforePublish {
                // The proof is finished but dies with the worker.
                stats.died_by_fault = true;
                return stats;
            }
        }

        if let Some(out_queue) = &opts.output_queue {
            for field in &opts.carry_fields {
                if output.get(field).is_none() {
                    if let Some(v) = input.get(field) {
                        output.insert(field.clone(), v.clone());
                    }
                }
            }
            let mut headers = delivery.envelope.headers.clone();
            let publish_span = opts
                .spans
                .as_ref()
                .map(|log| log.start("publish", stage, receive_ctx.as_ref()));
            if let Some(span) = &publish_span {
                headers.insert(TRACEPARENT.to_string(), span.traceparent());
            }
            let subject = match &opts.routing {
                None => out_queue.clone(),
                Some(r) => match extract_group_key(&output, &r.grouping_field) {
                    Ok(key) => {
                        partition_subject(out_queue, partition_for_key(key, r.num_partitions))
                    }
                    Err(e) => {
                        // A result that cannot be routed cannot be healed by
                        // retrying: count it, surface it, drop it.
                        if let Some(c) = &route_errors_total {
                            c.inc();
                        }
                        if let Some(span) = receive_span.as_mut() {
                            span.set_attr("route_error", e.to_string());
                        }
                        let _ = consumer.ack(&delivery);
                        continue;
                    }
                },
            };
            match bus.publish(&subject, output.clone(), headers) {
                Ok(_) => {}
                Err(BusError::Closed) => return stats,
                Err(_) => continue, // unacked; redelivery will retry the publish
            }
            if let Some(s) = publish_span {
                s.finish();
            }
        }

        if let Some(f) = &opts.fault {
            if f.armed() && f.site == FaultSite::AfterPublish {
                // Published but never acked: the repeat will publish a
                // duplicate for downstream dedup to absorb.
                stats.died_by_fault = true;
                return stats;
            }
        }

        if let (Some(store), Some(tid)) = (&opts.result_store, &task_id) {
            let _ = store.record(tid, &output.digest_hex());
        }
        let _ = consumer.ack(&delivery);
        stats.processed += 1;
        if let Some(c) = &tasks_total {
            c.inc();
        }
        if let Some(h) = &cycle_seconds {
            h.observe_duration(picked_up.elapsed());
        }
        if let Some(span) = receive_span {
            span.finish();
        }
    }
}

/// Publish one task to several queues at once — speculative redundancy for
/// the tail of a block, where duplicate work is cheaper than waiting out a
/// straggler. Failures part-way leave earlier publishes in place
/// (at-least-once; downstream dedup absorbs the overlap).
pub fn publish_redundant(
    bus: &Bus,
    queues: &[String],
    payload: Payload,
    headers: std::collections::BTreeMap<String, String>,
) -> Result<Vec<u64>, BusError> {
    let mut ids = Vec::with_capacity(queues.len());
    for q in queues {
        ids.push(bus.publish(q, payload.clone(), headers.clone())?);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{BusOptions, QueueConfig};
    use crate::executor::{SimBehavior, SimExecutor};
    use std::collections::BTreeMap;

    fn manual_bus() -> Bus {
        Bus::open(
            BusOptions::in_memory()
                .manual_sweep()
                .ack_timeout(Duration::from_millis(60)),
        )
        .unwrap()
    }

    fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
        let end = Instant::now() + timeout;
        while Instant::now() < end {
            if cond() {
                return true;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        cond()
    }

    fn echo_opts(stage: &str) -> DispatcherOptions {
        DispatcherOptions::new(stage, "in", "out", Arc::new(SimExecutor(SimBehavior::Echo)))
    }

    fn task(block: i64, id: &str) -> Payload {
        Payload::new().with("block_num", block).with("task_id", id)
    }

    #[test]
    fn executes_publishes_then_acks() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("in")).unwrap();
        bus.create_queue(QueueConfig::new("out")).unwrap();
        for i in 0..3 {
            bus.publish("in", task(i, &format!("t-{i}")), BTreeMap::new()).unwrap();
        }
        let h = spawn_dispatcher(&bus, echo_opts("exec")).unwrap();
        assert!(wait_until(Duration::from_secs(3), || {
            bus.stream_state("out").unwrap().depth == 3
        }));
        let stats = h.shutdown();
        assert_eq!(stats.processed, 3);
        assert_eq!(stats.failures, 0);
        assert_eq!(bus.stream_state("in").unwrap().depth, 0, "inputs acked");
        let c = bus.consumer(ConsumerHandle::new("out")).unwrap();
        let d = c.try_next().unwrap().unwrap();
        assert_eq!(d.envelope.payload.get_bool("proved"), Some(true));
        assert!(d.envelope.payload.get_int("block_num").is_some(), "ordering field carried");
    }

    #[test]
    fn trace_context_is_attached_downstream() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("in")).unwrap();
        bus.create_queue(QueueConfig::new("out")).unwrap();
        let spans = SpanLog::new();
        let mut opts = echo_opts("exec");
        opts.spans = Some(spans.clone());
        bus.publish("in", task(1, "t-1"), BTreeMap::new()).unwrap();
        let h = spawn_dispatcher(&bus, opts).unwrap();
        assert!(wait_until(Duration::from_secs(3), || {
            bus.stream_state("out").unwrap().depth == 1
        }));
        h.shutdown();
        let c = bus.consumer(ConsumerHandle::new("out")).unwrap();
        let d = c.try_next().unwrap().unwrap();
        let header = d.envelope.headers.get(TRACEPARENT).expect("trace header set");
        let ctx = crate::trace::TraceContext::parse(header).expect("well-formed");
        // receive + execute + publish, all in one trace.
        let recs = spans.records_for_trace(&ctx.trace_id_hex());
        assert_eq!(recs.len(), 3);
        let names: Vec<&str> = recs.iter().map(|r| r.name.as_str()).collect();
        assert!(names.contains(&"receive") && names.contains(&"execute") && names.contains(&"publish"));
    }

    #[test]
    fn known_results_are_skipped_without_republishing() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("in")).unwrap();
        bus.create_queue(QueueConfig::new("out")).unwrap();
        let store = ResultStore::in_memory();
        store.record("t-0", "digest-of-earlier-run").unwrap();
        let mut opts = echo_opts("exec");
        opts.result_store = Some(store.clone());
        bus.publish("in", task(0, "t-0"), BTreeMap::new()).unwrap();
        bus.publish("in", task(1, "t-1"), BTreeMap::new()).unwrap();
        let h = spawn_dispatcher(&bus, opts).unwrap();
        assert!(wait_until(Duration::from_secs(3), || {
            bus.stream_state("in").unwrap().depth == 0
        }));
        let stats = h.shutdown();
        assert_eq!(stats.idempotent_skips, 1);
        assert_eq!(stats.processed, 1);
        assert_eq!(bus.stream_state("out").unwrap().depth, 1, "only the new task published");
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn death_before_publish_loses_no_task() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("in").ack_wait(Duration::from_millis(60))).unwrap();
        bus.create_queue(QueueConfig::new("out")).unwrap();
        let switch = KillSwitch::new();
        let mut opts = echo_opts("exec");
        opts.executor = Arc::new(SimExecutor(SimBehavior::Sleep { millis: 150 }));
        opts.fault = Some(Fault::new(FaultSite::BeforePublish, switch.clone()));
        bus.publish("in", task(7, "t-7"), BTreeMap::new()).unwrap();
        let h = spawn_dispatcher(&bus, opts).unwrap();
        // Arm the switch while the task is mid-execution.
        assert!(wait_until(Duration::from_secs(2), || {
            bus.stream_state("in").unwrap().inflight == 1
        }));
        switch.trigger();
        assert!(wait_until(Duration::from_secs(2), || h.is_finished()));
        let stats = h.join();
        assert!(stats.died_by_fault);
        assert_eq!(stats.processed, 0);
        assert_eq!(bus.stream_state("out").unwrap().depth, 0, "nothing escaped");
        assert_eq!(bus.stream_state("in").unwrap().inflight, 1, "task died with the worker");

        // A replacement worker finishes the job after the lease expires.
        std::thread::sleep(Duration::from_millis(80));
        bus.redelivery_sweep();
        let h = spawn_dispatcher(&bus, echo_opts("exec")).unwrap();
        assert!(wait_until(Duration::from_secs(3), || {
            bus.stream_state("out").unwrap().depth == 1
        }));
        h.shutdown();
        assert_eq!(bus.stream_state("in").unwrap().depth, 0);
        let c = bus.consumer(ConsumerHandle::new("out")).unwrap();
        let d = c.try_next().unwrap().unwrap();
        assert_eq!(d.envelope.payload.task_id(), Some("t-7"));
    }

    #[test]
    fn death_after_publish_duplicates_downstream() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("in").ack_wait(Duration::from_millis(60))).unwrap();
        bus.create_queue(QueueConfig::new("out")).unwrap();
        let switch = KillSwitch::new();
        let mut opts = echo_opts("exec");
        opts.executor = Arc::new(SimExecutor(SimBehavior::Sleep { millis: 150 }));
        opts.fault = Some(Fault::new(FaultSite::AfterPublish, switch.clone()));
        bus.publish("in", task(7, "t-7"), BTreeMap::new()).unwrap();
        let h = spawn_dispatcher(&bus, opts).unwrap();
        assert!(wait_until(Duration::from_secs(2), || {
            bus.stream_state("in").unwrap().inflight == 1
        }));
        switch.trigger();
        assert!(wait_until(Duration::from_secs(2), || h.is_finished()));
        assert!(h.join().died_by_fault);
        assert_eq!(bus.stream_state("out").unwrap().depth, 1, "published before dying");

        std::thread::sleep(Duration::from_millis(80));
        bus.redelivery_sweep();
        let h = spawn_dispatcher(&bus, echo_opts("exec")).unwrap();
        assert!(wait_until(Duration::from_secs(3), || {
            bus.stream_state("in").unwrap().depth == 0
        }));
        h.shutdown();
        // The repeat published again: the duplicate is downstream's to drop.
        assert_eq!(bus.stream_state("out").unwrap().depth, 2);
    }

    #[test]
    fn shared_result_store_prevents_the_duplicate_instead() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("in").ack_wait(Duration::from_millis(60))).unwrap();
        bus.create_queue(QueueConfig::new("out")).unwrap();
        let store = ResultStore::in_memory();
        let switch = KillSwitch::new();
        let mut opts = echo_opts("exec");
        opts.result_store = Some(store.clone());
        opts.fault = Some(Fault::new(FaultSite::OnPickup, switch.clone()));
        bus.publish("in", task(7, "t-7"), BTreeMap::new()).unwrap();
        // First worker completes the task (switch not yet armed), records it,
        // then dies at the next pickup.
        let h = spawn_dispatcher(&bus, opts).unwrap();
        assert!(wait_until(Duration::from_secs(3), || {
            store.contains("t-7") && bus.stream_state("in").unwrap().depth == 0
        }));
        switch.trigger();
        assert!(wait_until(Duration::from_secs(2), || h.is_finished()));
        h.join();
        assert_eq!(bus.stream_state("out").unwrap().depth, 1);

        // Republish the same task id (a redundant copy): the store absorbs it.
        bus.publish("in", task(7, "t-7"), BTreeMap::new()).unwrap();
        let mut opts = echo_opts("exec");
        opts.result_store = Some(store.clone());
        let h = spawn_dispatcher(&bus, opts).unwrap();
        assert!(wait_until(Duration::from_secs(3), || {
            bus.stream_state("in").unwrap().depth == 0
        }));
        let stats = h.shutdown();
        assert_eq!(stats.idempotent_skips, 1);
        assert_eq!(bus.stream_state("out").unwrap().depth, 1, "no duplicate published");
    }

    #[test]
    fn durable_result_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idempotency").join("exec.log");
        {
            let store = ResultStore::durable(&path).unwrap();
            store.record("t-1", "abc").unwrap();
            store.record("t-2", "def").unwrap();
            store.record("t-1", "ignored-second-write").unwrap();
        }
        let store = ResultStore::durable(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert!(store.contains("t-1"));
        assert_eq!(store.digest("t-1").as_deref(), Some("abc"), "first write won");
    }

    #[test]
    fn routed_output_lands_on_the_group_partition() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("in")).unwrap();
        bus.create_queue(QueueConfig::new("agg.p0")).unwrap();
        bus.create_queue(QueueConfig::new("agg.p1")).unwrap();
        let mut opts = echo_opts("exec");
        opts.output_queue = Some("agg".to_string());
        opts.routing = Some(OutputRouting {
            grouping_field: "block_num".to_string(),
            num_partitions: 2,
        });
        bus.publish("in", task(4, "t-4"), BTreeMap::new()).unwrap();
        bus.publish("in", task(5, "t-5"), BTreeMap::new()).unwrap();
        let h = spawn_dispatcher(&bus, opts).unwrap();
        assert!(wait_until(Duration::from_secs(3), || {
            bus.stream_state("in").unwrap().depth == 0
        }));
        h.shutdown();
        assert_eq!(bus.stream_state("agg.p0").unwrap().depth, 1, "block 4 → partition 0");
        assert_eq!(bus.stream_state("agg.p1").unwrap().depth, 1, "block 5 → partition 1");
    }

    #[test]
    fn unroutable_output_is_counted_and_dropped() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("in")).unwrap();
        bus.create_queue(QueueConfig::new("agg.p0")).unwrap();
        let m = MetricsRegistry::new();
        // Echo output won't contain `batch_id`, and carry retains nothing
        // either, so routing must fail deterministically.
        let mut opts = echo_opts("exec");
        opts.output_queue = Some("agg".to_string());
        opts.metrics = Some(m.clone());
        opts.routing = Some(OutputRouting {
            grouping_field: "batch_id".to_string(),
            num_partitions: 1,
        });
        bus.publish("in", task(1, "t-1"), BTreeMap::new()).unwrap();
        let h = spawn_dispatcher(&bus, opts).unwrap();
        assert!(wait_until(Duration::from_secs(3), || {
            bus.stream_state("in").unwrap().depth == 0
        }));
        h.shutdown();
        assert_eq!(bus.stream_state("agg.p0").unwrap().depth, 0);
        assert_eq!(
            m.counter("dispatcher_route_errors_total", &[("stage", "exec")]).get(),
            1
        );
    }

    #[test]
    fn failures_stay_leased_for_retry() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("in").ack_wait(Duration::from_millis(60))).unwrap();
        bus.create_queue(QueueConfig::new("out")).unwrap();
        let attempts = Arc::new(AtomicBool::new(false));
        let attempts2 = attempts.clone();
        let flaky = move |p: &Payload, ctx: &ExecutionContext| {
            if ctx.attempt == 0 {
                attempts2.store(true, Ordering::SeqCst);
                Err(crate::executor::ExecError::Internal("transient".to_string()))
            } else {
                Ok(p.clone().with("proved", true))
            }
        };
        let mut opts = echo_opts("exec");
        opts.executor = Arc::new(flaky);
        bus.publish("in", task(3, "t-3"), BTreeMap::new()).unwrap();
        let h = spawn_dispatcher(&bus, opts).unwrap();
        assert!(wait_until(Duration::from_secs(2), || attempts.load(Ordering::SeqCst)));
        // First attempt failed; nothing published, input still resident.
        assert_eq!(bus.stream_state("out").unwrap().depth, 0);
        assert_eq!(bus.stream_state("in").unwrap().depth, 1);
        std::thread::sleep(Duration::from_millis(80));
        bus.redelivery_sweep();
        assert!(wait_until(Duration::from_secs(3), || {
            bus.stream_state("out").unwrap().depth == 1
        }));
        let stats = h.shutdown();
        assert_eq!(stats.failures, 1);
        assert_eq!(stats.processed, 1);
    }

    #[test]
    fn redundant_publish_fans_out_to_every_queue() {
        let bus = manual_bus();
        let queues: Vec<String> = (0..3).map(|i| format!("exec_{i}")).collect();
        for q in &queues {
            bus.create_queue(QueueConfig::new(q)).unwrap();
        }
        let ids = publish_redundant(&bus, &queues, task(9, "t-9"), BTreeMap::new()).unwrap();
        assert_eq!(ids.len(), 3);
        for q in &queues {
            assert_eq!(bus.stream_state(q).unwrap().depth, 1);
        }
    }
}
