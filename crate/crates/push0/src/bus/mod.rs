//! Embedded persistent priority message bus.
//!
//! Queues live in-process behind a mutex each (operations on one queue are
//! linearizable; different queues proceed independently). Delivery is
//! at-least-once within exclusive worker groups: a message is held by at most
//! one consumer of a group until it is acknowledged, its lease expires, or it
//! exhausts its retry budget and moves to the `<queue>.dlq` dead-letter queue.
//! Consumers acknowledge only after downstream effects are durable — the
//! three-phase pattern (execute, publish result, confirm, then ack) is what
//! makes crash recovery lossless.
//!
//! Backpressure has three layers: a queue depth cap that blocks producers
//! (`max_depth`), per-consumer in-flight windows (`max_inflight`), and an
//! optional token-bucket publish rate limit.
//!
//! Delivery order on a priority queue is (block ascending, retry descending,
//! enqueue time ascending); on a plain queue it is publish order. `pause`
//! simulates a bus outage: every operation on the queue blocks until the
//! window ends, leases keep ticking, and the first sweep after resume
//! redelivers whatever expired.

mod log;
pub mod socket;

pub use self::log::{DurableLog, IdBitmap, PublishRecord, RecoveredQueue};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsRegistry;
use crate::model::{extract_block, KeyError, TaskEnvelope};
use crate::payload::Payload;

/// Suffix of auto-created dead-letter queues.
pub const DLQ_SUFFIX: &str = ".dlq";
/// Header recording where a dead-lettered message came from.
pub const HDR_DLQ_SOURCE: &str = "dead_letter_source";
/// Header recording how many deliveries the message burned before giving up.
pub const HDR_DLQ_DELIVERIES: &str = "dead_letter_deliveries";

#[derive(Debug, Error)]
pub enum BusError {
    #[error("queue `{0}` does not exist")]
    UnknownQueue(String),
    #[error("queue `{0}` already exists")]
    QueueExists(String),
    #[error("bus is closed")]
    Closed,
    #[error("payload of {size} bytes exceeds the {limit}-byte cap on `{queue}`")]
    PayloadTooLarge {
        queue: String,
        size: usize,
        limit: usize,
    },
    #[error("message {id} is not inflight for this consumer on `{subject}`")]
    NotInflight { subject: String, id: u64 },
    #[error("cannot order message for priority queue `{queue}`: {source}")]
    Priority {
        queue: String,
        #[source]
        source: KeyError,
    },
    #[error("queue `{0}` is paused")]
    Paused(String),
    #[error("would block: `{0}`")]
    WouldBlock(String),
    #[error("durable log failure on `{queue}`: {source}")]
    Io {
        queue: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid consumer registration: {0}")]
    InvalidConsumer(String),
}

/// Token-bucket publish rate limit (backpressure layer three).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RateLimit {
    pub per_sec: f64,
    pub burst: f64,
}

/// Static configuration of one queue.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueueConfig {
    pub name: String,
    /// Depth cap (resident messages, in-flight included). Producers block at
    /// the cap. `None` = unbounded.
    pub max_depth: Option<usize>,
    /// Lease duration before an unacknowledged delivery is swept back.
    /// `None` uses the bus default (`ACK_WAIT` env seconds, or 30s).
    pub ack_timeout: Option<Duration>,
    /// Redelivery budget: after `max_retries` redeliveries the next expiry
    /// dead-letters the message.
    pub max_retries: u32,
    /// When set, delivery follows the priority order over this payload field
    /// instead of publish order. Publishing a message the field cannot order
    /// is refused.
    pub priority_field: Option<String>,
    pub max_payload_bytes: usize,
    pub rate_limit: Option<RateLimit>,
    /// Marks a pipeline output; carried for introspection, not interpreted by
    /// the bus itself.
    pub terminal: bool,
}

impl QueueConfig {
    pub fn new(name: impl Into<String>) -> Self {
        QueueConfig {
            name: name.into(),
            max_depth: None,
            ack_timeout: None,
            max_retries: 3,
            priority_field: None,
            max_payload_bytes: 8 * 1024 * 1024,
            rate_limit: None,
            terminal: false,
        }
    }

    pub fn priority(mut self, field: impl Into<String>) -> Self {
        self.priority_field = Some(field.into());
        self
    }

    pub fn depth_cap(mut self, max: usize) -> Self {
        self.max_depth = Some(max);
        self
    }

    pub fn ack_wait(mut self, d: Duration) -> Self {
        self.ack_timeout = Some(d);
        self
    }

    pub fn retries(mut self, n: u32) -> Self {
        self.max_retries = n;
        self
    }

    pub fn terminal(mut self) -> Self {
        self.terminal = true;
        self
    }
}

/// Registration request for a consumer.
#[derive(Debug, Clone)]
pub struct ConsumerHandle {
    pub queue: String,
    /// Exclusive delivery group. All consumers of a group share one stream of
    /// deliveries; distinct groups each see every message.
    pub worker_group: String,
    /// When set, the consumer reads the partitioned subjects
    /// `<queue>.p<i>` for each listed index instead of `<queue>` itself.
    pub partition_filter: Option<Vec<u32>>,
    /// Per-consumer in-flight window (backpressure layer two).
    pub max_inflight: usize,
}

impl ConsumerHandle {
    /// A consumer on `queue` in the group named after the queue — the common
    /// arrangement where every worker of a stage shares one group.
    pub fn new(queue: impl Into<String>) -> Self {
        let queue = queue.into();
        ConsumerHandle {
            worker_group: queue.clone(),
            queue,
            partition_filter: None,
            max_inflight: 64,
        }
    }

    pub fn group(mut self, g: impl Into<String>) -> Self {
        self.worker_group = g.into();
        self
    }

    pub fn partitions(mut self, parts: Vec<u32>) -> Self {
        self.partition_filter = Some(parts);
        self
    }

    pub fn inflight_window(mut self, n: usize) -> Self {
        self.max_inflight = n.max(1);
        self
    }
}

/// One delivered message plus the subject it must be acknowledged on.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub subject: String,
    pub envelope: TaskEnvelope,
}

/// Point-in-time counters for one queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    /// Resident, not fully consumed messages (in-flight ones included).
    pub depth: usize,
    /// Live leases across all worker groups.
    pub inflight: usize,
    /// Deliveries handed out since creation (redeliveries included).
    pub delivered_total: u64,
    /// Deliveries with retry_count > 0.
    pub redelivered_total: u64,
    /// Resident messages on this queue's dead-letter queue.
    pub dlq_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Background thread sweeps each queue every `min(T_ack/4, 250ms)`.
    Automatic,
    /// No background thread; tests and simulations call
    /// [`Bus::redelivery_sweep`] themselves.
    Manual,
}

/// Bus-wide options.
#[derive(Debug, Clone)]
pub struct BusOptions {
    /// Root directory for durable queues. `None` = memory only.
    pub durable_path: Option<PathBuf>,
    /// Default lease duration for queues that do not set their own. Read from
    /// the `ACK_WAIT` environment variable (seconds) when present, else 30s.
    pub default_ack_timeout: Duration,
    pub sweep: SweepMode,
    /// When set, the sweeper mirrors queue gauges and redelivery counters
    /// into this registry.
    pub metrics: Option<MetricsRegistry>,
}

impl Default for BusOptions {
    fn default() -> Self {
        BusOptions {
            durable_path: None,
            default_ack_timeout: ack_wait_from_env().unwrap_or(Duration::from_secs(30)),
            sweep: SweepMode::Automatic,
            metrics: None,
        }
    }
}

impl BusOptions {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn durable(path: impl Into<PathBuf>) -> Self {
        BusOptions {
            durable_path: Some(path.into()),
            ..Self::default()
        }
    }

    pub fn manual_sweep(mut self) -> Self {
        self.sweep = SweepMode::Manual;
        self
    }

    pub fn ack_timeout(mut self, d: Duration) -> Self {
        self.default_ack_timeout = d;
        self
    }

    pub fn with_metrics(mut self, m: MetricsRegistry) -> Self {
        self.metrics = Some(m);
        self
    }
}

/// `ACK_WAIT` environment override, in (possibly fractional) seconds.
pub fn ack_wait_from_env() -> Option<Duration> {
    std::env::var("ACK_WAIT")
        .ok()
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|s| *s > 0.0)
        .map(Duration::from_secs_f64)
}

// ---------------------------------------------------------------------------
// Internal queue state
// ---------------------------------------------------------------------------

/// Delivery order entry. Field order gives the lexicographic priority order;
/// `retry_rank` stores `u32::MAX - upcoming_retry`, so a higher retry count
/// sorts earlier. Plain queues zero everything but `id`, which preserves
/// publish order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct OrderKey {
    block: u64,
    retry_rank: u32,
    time_ns: u64,
    id: u64,
}

struct StoredMessage {
    payload: Payload,
    headers: BTreeMap<String, String>,
    enqueue_time_ns: u64,
    /// Priority field value, extracted once at publish.
    block: Option<u64>,
}

struct Inflight {
    consumer: u64,
    deadline: Instant,
    /// Retry count as delivered (for diagnostics).
    #[allow(dead_code)]
    retry_count: u32,
}

#[derive(Default)]
struct GroupState {
    ready: BTreeSet<OrderKey>,
    inflight: HashMap<u64, Inflight>,
    inflight_by_consumer: HashMap<u64, usize>,
    /// Deliveries handed out per live message (removed on consumption).
    deliveries: HashMap<u64, u32>,
    consumed: IdBitmap,
}

struct QueueState {
    next_id: u64,
    store: BTreeMap<u64, StoredMessage>,
    groups: BTreeMap<String, GroupState>,
    paused_until: Option<Instant>,
    delivered_total: u64,
    redelivered_total: u64,
    dead_lettered_total: u64,
    log: Option<DurableLog>,
    tokens: Option<TokenState>,
    closed: bool,
}

struct TokenState {
    limit: RateLimit,
    tokens: f64,
    refilled: Instant,
}

struct Queue {
    config: QueueConfig,
    ack_timeout: Duration,
    sweep_cadence: Duration,
    state: Mutex<QueueState>,
    /// Signaled on publish, redelivery, ack (in-flight window release),
    /// resume, and close.
    deliverable: Condvar,
    /// Signaled when depth drops below the cap.
    capacity: Condvar,
    last_swept: Mutex<Instant>,
}

impl Queue {
    fn key_for(&self, id: u64, msg: &StoredMessage, upcoming_retry: u32) -> OrderKey {
        match msg.block {
            Some(block) => OrderKey {
                block,
                retry_rank: u32::MAX - upcoming_retry,
                time_ns: msg.enqueue_time_ns,
                id,
            },
            None => OrderKey {
                block: 0,
                retry_rank: 0,
                time_ns: 0,
                id,
            },
        }
    }
}

struct BusShared {
    opts: BusOptions,
    queues: RwLock<BTreeMap<String, Arc<Queue>>>,
    closed: AtomicBool,
    next_consumer_id: AtomicU64,
    sweeper: Mutex<Option<std::thread::JoinHandle<()>>>,
}

/// Handle to the bus. Clones share the same instance; the bus shuts down when
/// [`Bus::close`] is called or the last clone drops.
#[derive(Clone)]
pub struct Bus {
    shared: Arc<BusShared>,
}

pub(crate) fn now_unix_ns() -> u64 {
    SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

impl Bus {
    /// Open a bus. With a durable path, every queue directory found under it
    /// is replayed: unconsumed messages become deliverable again (messages
    /// that were in flight at the crash included), consumed messages never
    /// reappear, and id assignment resumes past the highest replayed id.
    pub fn open(opts: BusOptions) -> Result<Bus, BusError> {
        let bus = Bus {
            shared: Arc::new(BusShared {
                opts: opts.clone(),
                queues: RwLock::new(BTreeMap::new()),
                closed: AtomicBool::new(false),
                next_consumer_id: AtomicU64::new(1),
                sweeper: Mutex::new(None),
            }),
        };
        if let Some(root) = &opts.durable_path {
            if root.exists() {
                let mut names: Vec<String> = Vec::new();
                for entry in std::fs::read_dir(root).map_err(|e| BusError::Io {
                    queue: root.display().to_string(),
                    source: e,
                })? {
                    let entry = entry.map_err(|e| BusError::Io {
                        queue: root.display().to_string(),
                        source: e,
                    })?;
                    if entry.path().join("config.json").is_file() {
                        names.push(entry.file_name().to_string_lossy().into_owned());
                    }
                }
                // Deterministic replay order; DLQs after their parents so
                // auto-creation never races the replay.
                names.sort();
                for name in names {
                    bus.load_queue(root.clone(), &name)?;
                }
            }
        }
        if opts.sweep == SweepMode::Automatic {
            bus.start_sweeper();
        }
        Ok(bus)
    }

    pub fn in_memory() -> Bus {
        Bus::open(BusOptions::in_memory()).expect("in-memory bus cannot fail to open")
    }

    fn load_queue(&self, root: PathBuf, name: &str) -> Result<(), BusError> {
        let dir = root.join(name);
        let io = |source| BusError::Io {
            queue: name.to_string(),
            source,
        };
        let cfg_bytes = std::fs::read(dir.join("config.json")).map_err(io)?;
        let config: QueueConfig = serde_json::from_slice(&cfg_bytes).map_err(|e| {
            BusError::Io {
                queue: name.to_string(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            }
        })?;
        let (log, recovered) = DurableLog::open(&dir).map_err(io)?;
        self.install_queue(config, Some((log, recovered)), false)?;
        Ok(())
    }

    fn install_queue(
        &self,
        config: QueueConfig,
        durable: Option<(DurableLog, RecoveredQueue)>,
        create_dlq: bool,
    ) -> Result<(), BusError> {
        let name = config.name.clone();
        let ack_timeout = config
            .ack_timeout
            .unwrap_or(self.shared.opts.default_ack_timeout);
        let sweep_cadence = (ack_timeout / 4).min(Duration::from_millis(250));
        let mut state = QueueState {
            next_id: 1,
            store: BTreeMap::new(),
            groups: BTreeMap::new(),
            paused_until: None,
            delivered_total: 0,
            redelivered_total: 0,
            dead_lettered_total: 0,
            log: None,
            tokens: config.rate_limit.map(|limit| TokenState {
                limit,
                tokens: limit.burst.max(1.0),
                refilled: Instant::now(),
            }),
            closed: false,
        };
        if let Some((log, recovered)) = durable {
            state.next_id = recovered.next_id;
            for rec in recovered.records {
                if recovered.consumed.contains(rec.id) {
                    continue;
                }
                let block = match &config.priority_field {
                    Some(f) => Some(extract_block(&rec.payload, f).map_err(|source| {
                        BusError::Priority {
                            queue: name.clone(),
                            source,
                        }
                    })?),
                    None => None,
                };
                state.store.insert(
                    rec.id,
                    StoredMessage {
                        payload: rec.payload,
                        headers: rec.headers,
                        enqueue_time_ns: rec.enqueue_time_ns,
                        block,
                    },
                );
            }
            state.log = Some(log);
        }
        let queue = Arc::new(Queue {
            ack_timeout,
            sweep_cadence,
            config,
            state: Mutex::new(state),
            deliverable: Condvar::new(),
            capacity: Condvar::new(),
            last_swept: Mutex::new(Instant::now()),
        });
        {
            let mut queues = self.shared.queues.write();
            if queues.contains_key(&name) {
                return Err(BusError::QueueExists(name));
            }
            queues.insert(name.clone(), queue);
        }
        if create_dlq && !name.ends_with(DLQ_SUFFIX) {
            let dlq_name = format!("{name}{DLQ_SUFFIX}");
            if !self.shared.queues.read().contains_key(&dlq_name) {
                self.create_queue(QueueConfig::new(dlq_name))?;
            }
        }
        Ok(())
    }

    /// Create a queue (and, unless it is itself a dead-letter queue, its
    /// `<name>.dlq` companion). With a durable root, the queue directory and
    /// config are persisted immediately.
    pub fn create_queue(&self, config: QueueConfig) -> Result<(), BusError> {
        if self.shared.closed.load(Ordering::SeqCst) {
            return Err(BusError::Closed);
        }
        let name = config.name.clone();
        if name.is_empty() || name.contains(' ') || name.contains('/') {
            return Err(BusError::InvalidConsumer(format!(
                "invalid queue name `{name}`"
            )));
        }
        let durable = match &self.shared.opts.durable_path {
            Some(root) => {
                let dir = root.join(&name);
                let io = |source| BusError::Io {
                    queue: name.clone(),
                    source,
                };
                std::fs::create_dir_all(&dir).map_err(io)?;
                let cfg_path = dir.join("config.json");
                if !cfg_path.exists() {
                    std::fs::write(&cfg_path, serde_json::to_vec(&config).unwrap()).map_err(io)?;
                }
                Some(DurableLog::open(&dir).map_err(io)?)
            }
            None => None,
        };
        self.install_queue(config, durable, true)
    }

    /// `create_queue` that tolerates the queue already existing (used by
    /// pipeline relaunch over a recovered durable bus).
    pub fn ensure_queue(&self, config: QueueConfig) -> Result<(), BusError> {
        match self.create_queue(config) {
            Err(BusError::QueueExists(_)) => Ok(()),
            other => other,
        }
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.shared.queues.read().keys().cloned().collect()
    }

    fn queue(&self, name: &str) -> Result<Arc<Queue>, BusError> {
        self.shared
            .queues
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| BusError::UnknownQueue(name.to_string()))
    }

    /// Publish a message. Blocks while the queue is paused, at its depth cap,
    /// or out of rate tokens. Returns the assigned message id once the
    /// message is resident (and, on a durable queue, fsynced).
    pub fn publish(
        &self,
        queue: &str,
        payload: Payload,
        headers: BTreeMap<String, String>,
    ) -> Result<u64, BusError> {
        self.publish_inner(queue, payload, headers, true)
    }

    /// Non-blocking publish: full, paused, or rate-limited queues return
    /// `WouldBlock` instead of waiting.
    pub fn try_publish(
        &self,
        queue: &str,
        payload: Payload,
        headers: BTreeMap<String, String>,
    ) -> Result<u64, BusError> {
        self.publish_inner(queue, payload, headers, false)
    }

    fn publish_inner(
        &self,
        queue: &str,
        payload: Payload,
        headers: BTreeMap<String, String>,
        block: bool,
    ) -> Result<u64, BusError> {
        let q = self.queue(queue)?;
        let bytes = payload.approx_bytes();
        if bytes > q.config.max_payload_bytes {
            return Err(BusError::PayloadTooLarge {
                queue: queue.to_string(),
                size: bytes,
                limit: q.config.max_payload_bytes,
            });
        }
        let block_num = match &q.config.priority_field {
            Some(f) => Some(extract_block(&payload, f).map_err(|source| BusError::Priority {
                queue: queue.to_string(),
                source,
            })?),
            None => None,
        };

        let mut st = q.state.lock();
        loop {
            if st.closed {
                return Err(BusError::Closed);
            }
            // Pause gate.
            if let Some(t) = st.paused_until {
                if Instant::now() < t {
                    if !block {
                        return Err(BusError::Paused(queue.to_string()));
                    }
                    q.capacity.wait_until(&mut st, t);
                    continue;
                }
                st.paused_until = None;
            }
            // Rate gate.
            if let Some(ts) = st.tokens.as_mut() {
                let now = Instant::now();
                let elapsed = now.duration_since(ts.refilled).as_secs_f64();
                ts.tokens = (ts.tokens + elapsed * ts.limit.per_sec).min(ts.limit.burst.max(1.0));
                ts.refilled = now;
                if ts.tokens < 1.0 {
                    if !block {
                        return Err(BusError::WouldBlock(format!(
                            "rate limit on `{queue}`"
                        )));
                    }
                    let wait = Duration::from_secs_f64((1.0 - ts.tokens) / ts.limit.per_sec);
                    let deadline = now + wait.min(Duration::from_millis(50));
                    q.capacity.wait_until(&mut st, deadline);
                    continue;
                }
                ts.tokens -= 1.0;
            }
            // Depth gate.
            if let Some(cap) = q.config.max_depth {
                if st.store.len() >= cap {
                    if !block {
                        return Err(BusError::WouldBlock(format!(
                            "queue `{queue}` is at its depth cap of {cap}"
                        )));
                    }
                    q.capacity.wait(&mut st);
                    continue;
                }
            }
            break;
        }

        let id = st.next_id;
        st.next_id += 1;
        let enqueue_time_ns = now_unix_ns();
        if let Some(log) = st.log.as_mut() {
            log.append_publish(&PublishRecord {
                id,
                payload: payload.clone(),
                headers: headers.clone(),
                enqueue_time_ns,
            })
            .map_err(|source| BusError::Io {
                queue: queue.to_string(),
                source,
            })?;
        }
        let msg = StoredMessage {
            payload,
            headers,
            enqueue_time_ns,
            block: block_num,
        };
        for group in st.groups.values_mut() {
            // Upcoming retry for a never-delivered message is 0.
            group.ready.insert(q.key_for(id, &msg, 0));
        }
        st.store.insert(id, msg);
        drop(st);
        q.deliverable.notify_all();
        Ok(id)
    }

    /// Register a consumer. Creates the worker group on first contact; a
    /// group created mid-stream observes the messages resident at that point
    /// and everything published later.
    pub fn consumer(&self, handle: ConsumerHandle) -> Result<Consumer, BusError> {
        if handle.max_inflight == 0 {
            return Err(BusError::InvalidConsumer(
                "max_inflight must be at least 1".to_string(),
            ));
        }
        if handle.worker_group.is_empty() {
            return Err(BusError::InvalidConsumer(
                "worker_group must be non-empty".to_string(),
            ));
        }
        let subject_names: Vec<String> = match &handle.partition_filter {
            None => vec![handle.queue.clone()],
            Some(parts) => {
                if parts.is_empty() {
                    return Err(BusError::InvalidConsumer(
                        "partition_filter must list at least one partition".to_string(),
                    ));
                }
                parts
                    .iter()
                    .map(|i| crate::collector::partition_subject(&handle.queue, *i))
                    .collect()
            }
        };
        let mut subjects = Vec::with_capacity(subject_names.len());
        for name in &subject_names {
            let q = self.queue(name)?;
            let mut st = q.state.lock();
            ensure_group(&q, &mut st, &handle.worker_group);
            drop(st);
            subjects.push((name.clone(), q));
        }
        Ok(Consumer {
            bus: self.clone(),
            id: self.shared.next_consumer_id.fetch_add(1, Ordering::SeqCst),
            handle,
            subjects,
            rotation: AtomicUsize::new(0),
        })
    }

    /// Counters for one queue, as of now.
    pub fn stream_state(&self, queue: &str) -> Result<StreamState, BusError> {
        let q = self.queue(queue)?;
        let st = q.state.lock();
        let inflight = st.groups.values().map(|g| g.inflight.len()).sum();
        let mut out = StreamState {
            depth: st.store.len(),
            inflight,
            delivered_total: st.delivered_total,
            redelivered_total: st.redelivered_total,
            dlq_depth: 0,
        };
        drop(st);
        if let Ok(dlq) = self.queue(&format!("{queue}{DLQ_SUFFIX}")) {
            out.dlq_depth = dlq.state.lock().store.len();
        }
        Ok(out)
    }

    /// Simulate a bus outage on one queue: every operation blocks until the
    /// window ends (or [`Bus::resume`]). Leases keep ticking; the first sweep
    /// after the window redelivers whatever expired during it.
    pub fn pause(&self, queue: &str, window: Duration) -> Result<(), BusError> {
        let q = self.queue(queue)?;
        let mut st = q.state.lock();
        st.paused_until = Some(Instant::now() + window);
        Ok(())
    }

    /// End a pause window early.
    pub fn resume(&self, queue: &str) -> Result<(), BusError> {
        let q = self.queue(queue)?;
        let mut st = q.state.lock();
        st.paused_until = None;
        drop(st);
        q.deliverable.notify_all();
        q.capacity.notify_all();
        Ok(())
    }

    /// Pause every queue (whole-bus outage).
    pub fn pause_all(&self, window: Duration) {
        for name in self.queue_names() {
            let _ = self.pause(&name, window);
        }
    }

    pub fn resume_all(&self) {
        for name in self.queue_names() {
            let _ = self.resume(&name);
        }
    }

    /// Sweep every queue now: expired leases are redelivered (or
    /// dead-lettered once past the retry budget) and durable consumption
    /// marks are flushed. Returns the number of messages re-enqueued.
    /// Invoked by the internal timer in automatic mode; public so manual-mode
    /// simulations can drive time themselves.
    pub fn redelivery_sweep(&self) -> u64 {
        let queues: Vec<(String, Arc<Queue>)> = self
            .shared
            .queues
            .read()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut redelivered = 0;
        for (name, q) in &queues {
            redelivered += self.sweep_queue(name, q);
        }
        redelivered
    }

    fn sweep_queue(&self, name: &str, q: &Arc<Queue>) -> u64 {
        struct DeadLetter {
            group: String,
            id: u64,
            deliveries: u32,
            payload: Payload,
            headers: BTreeMap<String, String>,
        }
        let now = Instant::now();
        let mut redelivered = 0u64;
        let mut dead: Vec<DeadLetter> = Vec::new();
        {
            let mut st = q.state.lock();
            if st.closed {
                return 0;
            }
            if let Some(t) = st.paused_until {
                if now < t {
                    return 0; // an unreachable bus redelivers nothing
                }
                st.paused_until = None;
                drop(st);
                q.deliverable.notify_all();
                q.capacity.notify_all();
                st = q.state.lock();
            }
            let max_retries = q.config.max_retries;
            let group_names: Vec<String> = st.groups.keys().cloned().collect();
            for gname in group_names {
                // Pull expired leases out of the group first; the store can
                // only be consulted once the group borrow ends.
                let mut expired: Vec<(u64, u32)> = Vec::new();
                {
                    let group = st.groups.get_mut(&gname).unwrap();
                    let ids: Vec<u64> = group
                        .inflight
                        .iter()
                        .filter(|(_, rec)| rec.deadline <= now)
                        .map(|(id, _)| *id)
                        .collect();
                    for id in ids {
                        let rec = group.inflight.remove(&id).unwrap();
                        if let Some(n) = group.inflight_by_consumer.get_mut(&rec.consumer) {
                            *n = n.saturating_sub(1);
                        }
                        expired.push((id, *group.deliveries.get(&id).unwrap_or(&0)));
                    }
                }
                let mut keys = Vec::new();
                for (id, deliveries) in expired {
                    let Some(msg) = st.store.get(&id) else { continue };
                    if deliveries > max_retries {
                        dead.push(DeadLetter {
                            group: gname.clone(),
                            id,
                            deliveries,
                            payload: msg.payload.clone(),
                            headers: msg.headers.clone(),
                        });
                    } else {
                        keys.push(q.key_for(id, msg, deliveries));
                        redelivered += 1;
                    }
                }
                let group = st.groups.get_mut(&gname).unwrap();
                for k in keys {
                    group.ready.insert(k);
                }
            }
            if let Some(log) = st.log.as_mut() {
                let _ = log.flush_consumed();
            }
        }
        if redelivered > 0 {
            q.deliverable.notify_all();
        }

        // Dead-letter outside the queue lock: publish to the DLQ first (so a
        // crash in between re-delivers rather than loses), then consume from
        // the source queue.
        if !dead.is_empty() {
            let dlq_name = format!("{name}{DLQ_SUFFIX}");
            for d in dead {
                let mut headers = d.headers;
                headers.insert(HDR_DLQ_SOURCE.to_string(), name.to_string());
                headers.insert(HDR_DLQ_DELIVERIES.to_string(), d.deliveries.to_string());
                match self.publish(&dlq_name, d.payload, headers) {
                    Ok(_) => {
                        let mut st = q.state.lock();
                        consume_message(q, &mut st, &d.group, d.id, true);
                        st.dead_lettered_total += 1;
                        drop(st);
                        q.capacity.notify_all();
                    }
                    Err(_) => {
                        // No DLQ (or closed): put the message back instead of
                        // stranding it.
                        let mut st = q.state.lock();
                        let key = st
                            .store
                            .get(&d.id)
                            .map(|msg| q.key_for(d.id, msg, d.deliveries));
                        if let (Some(key), Some(group)) = (key, st.groups.get_mut(&d.group)) {
                            group.ready.insert(key);
                        }
                    }
                }
            }
        }
        redelivered
    }

    fn start_sweeper(&self) {
        let shared = Arc::downgrade(&self.shared);
        let handle = std::thread::Builder::new()
            .name("bus-sweeper".to_string())
            .spawn(move || {
                let mut synced: HashMap<String, (u64, u64)> = HashMap::new();
                loop {
                    std::thread::sleep(Duration::from_millis(25));
                    let Some(shared) = shared.upgrade() else {
                        return;
                    };
                    if shared.closed.load(Ordering::SeqCst) {
                        return;
                    }
                    let bus = Bus { shared };
                    let queues: Vec<(String, Arc<Queue>)> = bus
                        .shared
                        .queues
                        .read()
                        .iter()
                        .map(|(k, v)| (k.clone(), v.clone()))
                        .collect();
                    let now = Instant::now();
                    for (name, q) in &queues {
                        let due = {
                            let mut last = q.last_swept.lock();
                            if now.duration_since(*last) >= q.sweep_cadence {
                                *last = now;
                                true
                            } else {
                                false
                            }
                        };
                        if due {
                            bus.sweep_queue(name, q);
                            if let Some(m) = &bus.shared.opts.metrics {
                                sync_queue_metrics(m, name, q, &mut synced);
                            }
                        }
                    }
                }
            })
            .expect("failed to spawn bus sweeper");
        *self.shared.sweeper.lock() = Some(handle);
    }

    /// Close the bus: every blocked or future operation fails with `Closed`,
    /// and durable consumption marks are flushed.
    pub fn close(&self) {
        if self.shared.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        for q in self.shared.queues.read().values() {
            let mut st = q.state.lock();
            st.closed = true;
            if let Some(log) = st.log.as_mut() {
                let _ = log.flush_consumed();
            }
            drop(st);
            q.deliverable.notify_all();
            q.capacity.notify_all();
        }
        if let Some(h) = self.shared.sweeper.lock().take() {
            let _ = h.join();
        }
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }
}

impl Drop for BusShared {
    fn drop(&mut self) {
        // Flush durable state if close() was never called.
        for q in self.queues.get_mut().values() {
            let mut st = q.state.lock();
            if let Some(log) = st.log.as_mut() {
                let _ = log.flush_consumed();
            }
        }
    }
}

fn ensure_group(q: &Queue, st: &mut QueueState, name: &str) {
    if st.groups.contains_key(name) {
        return;
    }
    let mut group = GroupState::default();
    for (id, msg) in &st.store {
        group.ready.insert(q.key_for(*id, msg, 0));
    }
    st.groups.insert(name.to_string(), group);
}

/// Mark `id` consumed for `group`; once every group has consumed it, drop it
/// from the store (and record full consumption durably).
fn consume_message(q: &Queue, st: &mut QueueState, group: &str, id: u64, force_flush: bool) {
    if let Some(g) = st.groups.get_mut(group) {
        g.consumed.set(id);
        g.deliveries.remove(&id);
    }
    let fully = st.groups.values().all(|g| g.consumed.contains(id));
    if fully {
        st.store.remove(&id);
        if let Some(log) = st.log.as_mut() {
            let _ = log.mark_consumed(id, force_flush);
        }
    }
    let _ = q;
}

fn sync_queue_metrics(
    m: &MetricsRegistry,
    name: &str,
    q: &Arc<Queue>,
    synced: &mut HashMap<String, (u64, u64)>,
) {
    let st = q.state.lock();
    let depth = st.store.len() as i64;
    let inflight: usize = st.groups.values().map(|g| g.inflight.len()).sum();
    let redelivered = st.redelivered_total;
    let dead = st.dead_lettered_total;
    drop(st);
    m.gauge("bus_queue_depth", &[("queue", name)]).set(depth);
    m.gauge("bus_queue_inflight", &[("queue", name)])
        .set(inflight as i64);
    let (last_re, last_dead) = synced.get(name).copied().unwrap_or((0, 0));
    if redelivered > last_re {
        m.counter("bus_redeliveries_total", &[("queue", name)])
            .add(redelivered - last_re);
    }
    if dead > last_dead {
        m.counter("bus_dead_lettered_total", &[("queue", name)])
            .add(dead - last_dead);
    }
    synced.insert(name.to_string(), (redelivered, dead));
}

// ---------------------------------------------------------------------------
// Consumer
// ---------------------------------------------------------------------------

/// A registered consumer. Dropping a consumer does *not* release its leases:
/// exactly like a crashed worker process, in-flight messages stay claimed
/// until their deadlines expire and the sweep returns them.
pub struct Consumer {
    bus: Bus,
    id: u64,
    handle: ConsumerHandle,
    subjects: Vec<(String, Arc<Queue>)>,
    rotation: AtomicUsize,
}

impl Consumer {
    pub fn worker_group(&self) -> &str {
        &self.handle.worker_group
    }

    pub fn subjects(&self) -> Vec<&str> {
        self.subjects.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Block until a message is available (or the bus closes).
    pub fn next(&self) -> Result<Delivery, BusError> {
        match self.next_deadline(None)? {
            Some(d) => Ok(d),
            None => unreachable!("deadline-less next returned empty"),
        }
    }

    /// Block up to `timeout`; `Ok(None)` when nothing became available.
    pub fn next_timeout(&self, timeout: Duration) -> Result<Option<Delivery>, BusError> {
        self.next_deadline(Some(Instant::now() + timeout))
    }

    /// Non-blocking probe across this consumer's subjects.
    pub fn try_next(&self) -> Result<Option<Delivery>, BusError> {
        let n = self.subjects.len();
        let start = self.rotation.load(Ordering::Relaxed);
        for k in 0..n {
            let idx = (start + k) % n;
            let (name, q) = &self.subjects[idx];
            if let Some(env) = self.try_deliver(q)? {
                self.rotation.store((idx + 1) % n, Ordering::Relaxed);
                return Ok(Some(Delivery {
                    subject: name.clone(),
                    envelope: env,
                }));
            }
        }
        Ok(None)
    }

    fn next_deadline(&self, deadline: Option<Instant>) -> Result<Option<Delivery>, BusError> {
        if self.subjects.len() == 1 {
            let (name, q) = &self.subjects[0];
            return Ok(self
                .blocking_deliver(q, deadline)?
                .map(|envelope| Delivery {
                    subject: name.clone(),
                    envelope,
                }));
        }
        // Multiple subjects: fair poll with a short parked interval. Wakeups
        // ride on the poll cadence, which only multi-queue collectors use.
        loop {
            if let Some(d) = self.try_next()? {
                return Ok(Some(d));
            }
            if let Some(dl) = deadline {
                if Instant::now() >= dl {
                    return Ok(None);
                }
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    /// Deliver from one subject without waiting.
    fn try_deliver(&self, q: &Arc<Queue>) -> Result<Option<TaskEnvelope>, BusError> {
        let mut st = q.state.lock();
        if st.closed {
            return Err(BusError::Closed);
        }
        if let Some(t) = st.paused_until {
            if Instant::now() < t {
                return Ok(None); // unreachable during an outage; not an error for polling
            }
            st.paused_until = None;
        }
        Ok(self.deliver_locked(q, &mut st))
    }

    fn blocking_deliver(
        &self,
        q: &Arc<Queue>,
        deadline: Option<Instant>,
    ) -> Result<Option<TaskEnvelope>, BusError> {
        let mut st = q.state.lock();
        loop {
            if st.closed {
                return Err(BusError::Closed);
            }
            if let Some(t) = st.paused_until {
                let now = Instant::now();
                if now < t {
                    let wake = deadline.map_or(t, |d| d.min(t));
                    q.deliverable.wait_until(&mut st, wake);
                    if let Some(d) = deadline {
                        if Instant::now() >= d {
                            return Ok(None);
                        }
                    }
                    continue;
                }
                st.paused_until = None;
            }
            if let Some(env) = self.deliver_locked(q, &mut st) {
                return Ok(Some(env));
            }
            match deadline {
                Some(d) => {
                    if Instant::now() >= d {
                        return Ok(None);
                    }
                    q.deliverable.wait_until(&mut st, d);
                }
                None => q.deliverable.wait(&mut st),
            }
        }
    }

    fn deliver_locked(&self, q: &Queue, st: &mut QueueState) -> Option<TaskEnvelope> {
        let group = st.groups.get_mut(&self.handle.worker_group)?;
        let open = *group.inflight_by_consumer.get(&self.id).unwrap_or(&0);
        if open >= self.handle.max_inflight {
            return None;
        }
        let key = group.ready.iter().next().copied()?;
        group.ready.remove(&key);
        let id = key.id;
        let deliveries = group.deliveries.entry(id).or_insert(0);
        *deliveries += 1;
        let retry_count = *deliveries - 1;
        group.inflight.insert(
            id,
            Inflight {
                consumer: self.id,
                deadline: Instant::now() + q.ack_timeout,
                retry_count,
            },
        );
        *group.inflight_by_consumer.entry(self.id).or_insert(0) += 1;
        st.delivered_total += 1;
        if retry_count > 0 {
            st.redelivered_total += 1;
        }
        let msg = st.store.get(&id).expect("ready id must be resident");
        Some(TaskEnvelope {
            message_id: id,
            payload: msg.payload.clone(),
            headers: msg.headers.clone(),
            enqueue_time_ns: msg.enqueue_time_ns,
            retry_count,
        })
    }

    /// Acknowledge a delivery this consumer holds. Only valid while the lease
    /// is live: after an expiry-and-redelivery the original holder gets
    /// `NotInflight`, which callers treat as "someone else owns it now".
    pub fn ack(&self, delivery: &Delivery) -> Result<(), BusError> {
        self.ack_id(&delivery.subject, delivery.envelope.message_id)
    }

    pub fn ack_id(&self, subject: &str, id: u64) -> Result<(), BusError> {
        let q = self.subject(subject)?;
        let mut st = self.lock_unpaused(&q)?;
        let group = st
            .groups
            .get_mut(&self.handle.worker_group)
            .ok_or_else(|| BusError::NotInflight {
                subject: subject.to_string(),
                id,
            })?;
        match group.inflight.get(&id) {
            Some(rec) if rec.consumer == self.id => {
                group.inflight.remove(&id);
                if let Some(n) = group.inflight_by_consumer.get_mut(&self.id) {
                    *n = n.saturating_sub(1);
                }
                let group_name = self.handle.worker_group.clone();
                consume_message(&q, &mut st, &group_name, id, false);
                drop(st);
                q.capacity.notify_all();
                q.deliverable.notify_all(); // releases in-flight-window waiters
                Ok(())
            }
            _ => Err(BusError::NotInflight {
                subject: subject.to_string(),
                id,
            }),
        }
    }

    /// Extend the lease on a delivery by a full ack-timeout from now. Workers
    /// running long tasks call this on a timer so live work is never swept.
    pub fn heartbeat(&self, delivery: &Delivery) -> Result<(), BusError> {
        self.heartbeat_id(&delivery.subject, delivery.envelope.message_id)
    }

    pub fn heartbeat_id(&self, subject: &str, id: u64) -> Result<(), BusError> {
        let q = self.subject(subject)?;
        let mut st = self.lock_unpaused(&q)?;
        let group = st
            .groups
            .get_mut(&self.handle.worker_group)
            .ok_or_else(|| BusError::NotInflight {
                subject: subject.to_string(),
                id,
            })?;
        match group.inflight.get_mut(&id) {
            Some(rec) if rec.consumer == self.id => {
                rec.deadline = Instant::now() + q.ack_timeout;
                Ok(())
            }
            _ => Err(BusError::NotInflight {
                subject: subject.to_string(),
                id,
            }),
        }
    }

    fn subject(&self, name: &str) -> Result<Arc<Queue>, BusError> {
        self.subjects
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, q)| q.clone())
            .ok_or_else(|| BusError::UnknownQueue(name.to_string()))
    }

    /// Lock a subject's state, honoring pause windows (an unreachable bus
    /// blocks acknowledgments too).
    fn lock_unpaused<'a>(
        &self,
        q: &'a Arc<Queue>,
    ) -> Result<parking_lot::MutexGuard<'a, QueueState>, BusError> {
        let mut st = q.state.lock();
        loop {
            if st.closed {
                return Err(BusError::Closed);
            }
            match st.paused_until {
                Some(t) if Instant::now() < t => {
                    q.deliverable.wait_until(&mut st, t);
                }
                _ => {
                    st.paused_until = None;
                    return Ok(st);
                }
            }
        }
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn headers() -> BTreeMap<String, String> {
        BTreeMap::new()
    }

    fn block_payload(block: i64, tag: &str) -> Payload {
        Payload::new().with("block_num", block).with("tag", tag)
    }

    fn manual_bus() -> Bus {
        Bus::open(
            BusOptions::in_memory()
                .manual_sweep()
                .ack_timeout(Duration::from_millis(40)),
        )
        .unwrap()
    }

    #[test]
    fn fresh_queue_state_is_all_zero() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q")).unwrap();
        let st = bus.stream_state("q").unwrap();
        assert_eq!(
            st,
            StreamState {
                depth: 0,
                inflight: 0,
                delivered_total: 0,
                redelivered_total: 0,
                dlq_depth: 0
            }
        );
    }

    #[test]
    fn publish_deliver_ack_roundtrip() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q")).unwrap();
        let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
        for i in 0..5i64 {
            bus.publish("q", Payload::new().with("i", i), headers()).unwrap();
        }
        assert_eq!(bus.stream_state("q").unwrap().depth, 5);
        for i in 0..5i64 {
            let d = c.next_timeout(Duration::from_millis(200)).unwrap().unwrap();
            assert_eq!(d.envelope.payload.get_int("i"), Some(i));
            assert_eq!(d.envelope.retry_count, 0);
            c.ack(&d).unwrap();
        }
        let st = bus.stream_state("q").unwrap();
        assert_eq!(st.depth, 0);
        assert_eq!(st.inflight, 0);
        assert_eq!(st.delivered_total, 5);
        assert_eq!(st.dlq_depth, 0);
    }

    #[test]
    fn message_ids_are_unique_and_monotonic() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q")).unwrap();
        let ids: Vec<u64> = (0..10)
            .map(|i| bus.publish("q", Payload::new().with("i", i as i64), headers()).unwrap())
            .collect();
        assert_eq!(ids, (1..=10).collect::<Vec<u64>>());
    }

    #[test]
    fn exclusive_delivery_within_a_group() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q")).unwrap();
        let a = bus.consumer(ConsumerHandle::new("q")).unwrap();
        let b = bus.consumer(ConsumerHandle::new("q")).unwrap();
        bus.publish("q", Payload::new().with("i", 1i64), headers()).unwrap();
        let got_a = a.try_next().unwrap();
        let got_b = b.try_next().unwrap();
        assert!(got_a.is_some() ^ got_b.is_some(), "exactly one consumer holds it");
        assert_eq!(bus.stream_state("q").unwrap().inflight, 1);
    }

    #[test]
    fn distinct_worker_groups_each_see_every_message() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q")).unwrap();
        let a = bus.consumer(ConsumerHandle::new("q").group("alpha")).unwrap();
        let b = bus.consumer(ConsumerHandle::new("q").group("beta")).unwrap();
        bus.publish("q", Payload::new().with("i", 1i64), headers()).unwrap();
        let da = a.try_next().unwrap().expect("group alpha gets a copy");
        let db = b.try_next().unwrap().expect("group beta gets a copy");
        assert_eq!(da.envelope.message_id, db.envelope.message_id);
        a.ack(&da).unwrap();
        assert_eq!(bus.stream_state("q").unwrap().depth, 1, "beta still pending");
        b.ack(&db).unwrap();
        assert_eq!(bus.stream_state("q").unwrap().depth, 0);
    }

    #[test]
    fn priority_queue_dequeues_blocks_in_order() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q").priority("block_num")).unwrap();
        for b in [5i64, 3, 9] {
            bus.publish("q", block_payload(b, "x"), headers()).unwrap();
        }
        let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
        let got: Vec<i64> = (0..3)
            .map(|_| {
                let d = c.try_next().unwrap().unwrap();
                c.ack(&d).unwrap();
                d.envelope.payload.get_int("block_num").unwrap()
            })
            .collect();
        assert_eq!(got, vec![3, 5, 9]);
    }

    #[test]
    fn priority_queue_refuses_unorderable_payloads() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q").priority("block_num")).unwrap();
        let err = bus.publish("q", Payload::new().with("other", 1i64), headers());
        assert!(matches!(err, Err(BusError::Priority { .. })));
    }

    #[test]
    fn redelivery_increments_retry_and_outranks_fresh_same_block() {
        let bus = manual_bus();
        bus.create_queue(
            QueueConfig::new("q")
                .priority("block_num")
                .ack_wait(Duration::from_millis(30))
                .retries(10),
        )
        .unwrap();
        let c = bus.consumer(ConsumerHandle::new("q").inflight_window(1)).unwrap();
        bus.publish("q", block_payload(5, "first"), headers()).unwrap();
        let d = c.try_next().unwrap().unwrap();
        assert_eq!(d.envelope.retry_count, 0);
        // Lease expires; a fresh message for the same block arrives.
        std::thread::sleep(Duration::from_millis(45));
        bus.publish("q", block_payload(5, "fresh"), headers()).unwrap();
        assert_eq!(bus.redelivery_sweep(), 1);
        let d2 = c.try_next().unwrap().unwrap();
        assert_eq!(d2.envelope.payload.get_str("tag"), Some("first"));
        assert_eq!(d2.envelope.retry_count, 1, "one redelivery so far");
        assert_eq!(bus.stream_state("q").unwrap().redelivered_total, 1);
        c.ack(&d2).unwrap();
        // Acking the long-gone first delivery is refused once consumed.
        assert!(matches!(c.ack(&d), Err(BusError::NotInflight { .. })));
    }

    #[test]
    fn a_lease_lost_to_another_worker_cannot_be_acked_by_the_loser() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q").ack_wait(Duration::from_millis(30))).unwrap();
        bus.publish("q", Payload::new().with("i", 1i64), headers()).unwrap();
        let slow = bus.consumer(ConsumerHandle::new("q")).unwrap();
        let fast = bus.consumer(ConsumerHandle::new("q")).unwrap();
        let d = slow.try_next().unwrap().unwrap();
        std::thread::sleep(Duration::from_millis(40));
        bus.redelivery_sweep();
        let d2 = fast.try_next().unwrap().expect("redelivered to the survivor");
        // The worker that lost the lease wakes back up and tries to ack.
        assert!(matches!(slow.ack(&d), Err(BusError::NotInflight { .. })));
        fast.ack(&d2).unwrap();
        assert_eq!(bus.stream_state("q").unwrap().depth, 0);
    }

    #[test]
    fn heartbeat_extends_the_lease() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q").ack_wait(Duration::from_millis(50))).unwrap();
        bus.publish("q", Payload::new().with("i", 1i64), headers()).unwrap();
        let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
        let d = c.try_next().unwrap().unwrap();
        for _ in 0..4 {
            std::thread::sleep(Duration::from_millis(30));
            c.heartbeat(&d).unwrap();
            assert_eq!(bus.redelivery_sweep(), 0, "live lease must not be swept");
        }
        c.ack(&d).unwrap();
        assert_eq!(bus.stream_state("q").unwrap().redelivered_total, 0);
    }

    #[test]
    fn retry_budget_exhaustion_dead_letters_with_provenance() {
        let bus = manual_bus();
        bus.create_queue(
            QueueConfig::new("q")
                .ack_wait(Duration::from_millis(10))
                .retries(3),
        )
        .unwrap();
        bus.publish("q", Payload::new().with("task_id", "t-1"), headers()).unwrap();
        let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
        // Four failed deliveries: retry counts 0,1,2,3.
        for expected_retry in 0..4u32 {
            let d = c.try_next().unwrap().expect("still deliverable");
            assert_eq!(d.envelope.retry_count, expected_retry);
            std::thread::sleep(Duration::from_millis(15));
            bus.redelivery_sweep();
        }
        assert!(c.try_next().unwrap().is_none(), "budget exhausted");
        let st = bus.stream_state("q").unwrap();
        assert_eq!(st.depth, 0);
        assert_eq!(st.dlq_depth, 1);
        let dc = bus.consumer(ConsumerHandle::new("q.dlq")).unwrap();
        let dead = dc.try_next().unwrap().unwrap();
        assert_eq!(dead.envelope.payload.task_id(), Some("t-1"));
        assert_eq!(dead.envelope.headers.get(HDR_DLQ_SOURCE).unwrap(), "q");
        assert_eq!(dead.envelope.headers.get(HDR_DLQ_DELIVERIES).unwrap(), "4");
    }

    #[test]
    fn depth_cap_blocks_producers_until_consumption() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q").depth_cap(2)).unwrap();
        bus.publish("q", Payload::new().with("i", 1i64), headers()).unwrap();
        bus.publish("q", Payload::new().with("i", 2i64), headers()).unwrap();
        assert!(matches!(
            bus.try_publish("q", Payload::new().with("i", 3i64), headers()),
            Err(BusError::WouldBlock(_))
        ));
        let bus2 = bus.clone();
        let unblocked = std::thread::spawn(move || {
            let t0 = Instant::now();
            bus2.publish("q", Payload::new().with("i", 3i64), headers()).unwrap();
            t0.elapsed()
        });
        std::thread::sleep(Duration::from_millis(60));
        let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
        let d = c.try_next().unwrap().unwrap();
        c.ack(&d).unwrap();
        let waited = unblocked.join().unwrap();
        assert!(waited >= Duration::from_millis(50), "producer actually blocked");
        assert_eq!(bus.stream_state("q").unwrap().depth, 2);
    }

    #[test]
    fn per_consumer_inflight_window_gates_delivery() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q")).unwrap();
        for i in 0..3i64 {
            bus.publish("q", Payload::new().with("i", i), headers()).unwrap();
        }
        let c = bus.consumer(ConsumerHandle::new("q").inflight_window(2)).unwrap();
        let d1 = c.try_next().unwrap().unwrap();
        let _d2 = c.try_next().unwrap().unwrap();
        assert!(c.try_next().unwrap().is_none(), "window of 2 is full");
        c.ack(&d1).unwrap();
        assert!(c.try_next().unwrap().is_some(), "ack reopens the window");
    }

    #[test]
    fn payload_cap_is_enforced() {
        let bus = manual_bus();
        let mut cfg = QueueConfig::new("q");
        cfg.max_payload_bytes = 64;
        bus.create_queue(cfg).unwrap();
        let big = Payload::new().with("data", "x".repeat(100).as_str());
        assert!(matches!(
            bus.publish("q", big, headers()),
            Err(BusError::PayloadTooLarge { .. })
        ));
    }

    #[test]
    fn pause_blocks_operations_and_resume_releases_them() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q").ack_wait(Duration::from_millis(30))).unwrap();
        bus.publish("q", Payload::new().with("i", 1i64), headers()).unwrap();
        let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
        let d = c.try_next().unwrap().unwrap();
        bus.pause("q", Duration::from_secs(60)).unwrap();
        assert!(matches!(
            bus.try_publish("q", Payload::new().with("i", 2i64), headers()),
            Err(BusError::Paused(_))
        ));
        assert!(c.try_next().unwrap().is_none());
        // The lease kept ticking through the outage.
        std::thread::sleep(Duration::from_millis(40));
        assert_eq!(bus.redelivery_sweep(), 0, "paused queue redelivers nothing");
        bus.resume("q").unwrap();
        assert_eq!(bus.redelivery_sweep(), 1, "expired lease redelivered after resume");
        let d2 = c.try_next().unwrap().unwrap();
        assert_eq!(d2.envelope.retry_count, 1);
        c.ack(&d2).unwrap();
        assert!(matches!(c.ack(&d), Err(BusError::NotInflight { .. })));
    }

    #[test]
    fn pause_window_expires_on_its_own() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q")).unwrap();
        bus.pause("q", Duration::from_millis(50)).unwrap();
        let t0 = Instant::now();
        bus.publish("q", Payload::new().with("i", 1i64), headers()).unwrap();
        assert!(t0.elapsed() >= Duration::from_millis(45));
    }

    #[test]
    fn rate_limit_paces_publishes() {
        let bus = manual_bus();
        let mut cfg = QueueConfig::new("q");
        cfg.rate_limit = Some(RateLimit { per_sec: 100.0, burst: 1.0 });
        bus.create_queue(cfg).unwrap();
        let t0 = Instant::now();
        for i in 0..6i64 {
            bus.publish("q", Payload::new().with("i", i), headers()).unwrap();
        }
        // Five refills beyond the initial token at 10ms each.
        assert!(t0.elapsed() >= Duration::from_millis(40));
    }

    #[test]
    fn close_fails_blocked_consumers() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q")).unwrap();
        let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
        let bus2 = bus.clone();
        let waiter = std::thread::spawn(move || c.next());
        std::thread::sleep(Duration::from_millis(50));
        bus2.close();
        assert!(matches!(waiter.join().unwrap(), Err(BusError::Closed)));
    }

    #[test]
    fn durable_recovery_restores_unconsumed_only() {
        let dir = tempfile::tempdir().unwrap();
        {
            let bus = Bus::open(BusOptions::durable(dir.path()).manual_sweep()).unwrap();
            bus.create_queue(QueueConfig::new("q").priority("block_num")).unwrap();
            for b in 0..5i64 {
                bus.publish("q", block_payload(b, "x"), headers()).unwrap();
            }
            let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
            for _ in 0..2 {
                let d = c.try_next().unwrap().unwrap();
                c.ack(&d).unwrap();
            }
            // One message in flight (unacked) at "crash".
            let _held = c.try_next().unwrap().unwrap();
            bus.close();
        }
        let bus = Bus::open(BusOptions::durable(dir.path()).manual_sweep()).unwrap();
        let st = bus.stream_state("q").unwrap();
        assert_eq!(st.depth, 3, "two consumed stay gone; the in-flight one survives");
        let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
        let blocks: Vec<i64> = (0..3)
            .map(|_| {
                let d = c.try_next().unwrap().unwrap();
                c.ack(&d).unwrap();
                d.envelope.payload.get_int("block_num").unwrap()
            })
            .collect();
        assert_eq!(blocks, vec![2, 3, 4], "the unacked message is deliverable again");
        // Id assignment continues without reuse.
        let id = bus.publish("q", block_payload(9, "x"), headers()).unwrap();
        assert_eq!(id, 6);
        bus.close();
    }

    #[test]
    fn consumer_drop_does_not_release_leases() {
        let bus = manual_bus();
        bus.create_queue(QueueConfig::new("q").ack_wait(Duration::from_millis(40))).unwrap();
        bus.publish("q", Payload::new().with("i", 1i64), headers()).unwrap();
        {
            let c = bus.consumer(ConsumerHandle::new("q")).unwrap();
            let _d = c.try_next().unwrap().unwrap();
            // c drops here holding the lease — a crashed worker.
        }
        let c2 = bus.consumer(ConsumerHandle::new("q")).unwrap();
        assert!(c2.try_next().unwrap().is_none(), "lease survives the drop");
        std::thread::sleep(Duration::from_millis(50));
        bus.redelivery_sweep();
        let d = c2.try_next().unwrap().unwrap();
        assert_eq!(d.envelope.retry_count, 1);
    }
}
