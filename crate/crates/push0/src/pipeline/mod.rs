//! Declarative pipeline runtime.
//!
//! A pipeline is described as a set of named stages — dispatchers and
//! collectors — wired together by queue names. The description says *what*
//! runs (executor, replica count, completion rule, partitioning); the
//! runtime derives the rest: it creates every queue (partition subjects
//! included), routes producers toward partitioned collectors, shares one
//! idempotency store per dispatcher stage, and tears the whole thing down
//! in topology order.
//!
//! Configuration is TOML, one table per stage, with UPPERCASE keys:
//!
//! ```toml
//! [prove]
//! KIND = "dispatcher"
//! INPUT_QUEUE = "witnesses"
//! OUTPUT_QUEUE = "proofs"
//! EXECUTOR = "sim:delay:prove_millis"
//! REPLICAS = 4
//! PRIORITY_FIELD = "block_num"
//!
//! [aggregate]
//! KIND = "collector"
//! INPUT_QUEUE = "proofs"
//! OUTPUT_QUEUE = "batches"
//! STRATEGY = "match"
//! NUM_INPUTS = 8
//! NUM_COLLECTORS = 4
//! COLLECT_TIMEOUT_PERIOD_MILLIS = 30000
//! ```
//!
//! Every key can be overridden from the environment as `<STAGE>__<KEY>`
//! (e.g. `PROVE__REPLICAS=8`), so a deployment can resize a fleet without
//! editing the file.

mod topologies;

pub use topologies::{
    fan_in, multi_queue_join, parallel_dispatchers, production_chain, single_chain,
    builtin_topology, TOPOLOGY_NAMES,
};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{Bus, BusError, QueueConfig};
use crate::collector::{
    spawn_collector, CollectorError, CollectorHandle, CollectorOptions, CollectorStats,
    DrainOutcome, PartitionPlan, RoutingState, StrategyRegistry, StrategySpec,
    partition_for_key, partition_subject,
};
use crate::dispatcher::{
    spawn_dispatcher, DispatcherHandle, DispatcherOptions, DispatcherStats, Fault, FaultSite,
    KillSwitch, OutputRouting, ResultStore,
};
use crate::executor::{ExecutorSpec, InProcessRegistry, TaskExecutor};
use crate::metrics::MetricsRegistry;
use crate::model::extract_group_key;
use crate::payload::Payload;
use crate::trace::SpanLog;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Collector(#[from] CollectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One queue name or several (a collector joining across queues).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QueueRef {
    One(String),
    Many(Vec<String>),
}

impl QueueRef {
    pub fn names(&self) -> Vec<String> {
        match self {
            QueueRef::One(q) => vec![q.clone()],
            QueueRef::Many(qs) => qs.clone(),
        }
    }

    pub fn first(&self) -> &str {
        match self {
            QueueRef::One(q) => q,
            QueueRef::Many(qs) => &qs[0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Dispatcher,
    Collector,
}

/// One stage of a pipeline. Field names mirror the UPPERCASE config keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Omitted: inferred — a stage with an `EXECUTOR` is a dispatcher,
    /// anything else is a collector.
    #[serde(rename = "KIND", skip_serializing_if = "Option::is_none")]
    pub kind: Option<StageKind>,
    #[serde(rename = "INPUT_QUEUE")]
    pub input_queue: QueueRef,
    #[serde(rename = "OUTPUT_QUEUE", skip_serializing_if = "Option::is_none")]
    pub output_queue: Option<String>,
    /// Executor spec: `sim:echo`, `sim:sleep:<ms>`, `sim:delay:<field>`,
    /// `proc:<name>`, `exec:<program> [args...]`.
    #[serde(rename = "EXECUTOR", skip_serializing_if = "Option::is_none")]
    pub executor: Option<String>,
    #[serde(rename = "REPLICAS", skip_serializing_if = "Option::is_none")]
    pub replicas: Option<u32>,
    #[serde(rename = "STRATEGY", skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(rename = "NUM_INPUTS", skip_serializing_if = "Option::is_none")]
    pub num_inputs: Option<u64>,
    #[serde(rename = "GROUPING_FIELD", skip_serializing_if = "Option::is_none")]
    pub grouping_field: Option<String>,
    #[serde(rename = "COLLECT_TIMEOUT_PERIOD_MILLIS", skip_serializing_if = "Option::is_none")]
    pub collect_timeout_period_millis: Option<u64>,
    #[serde(rename = "NUM_COLLECTORS", skip_serializing_if = "Option::is_none")]
    pub num_collectors: Option<u32>,
    /// Run only this collector index in this process (fleet members hosted
    /// elsewhere).
    #[serde(rename = "COLLECTOR_INDEX", skip_serializing_if = "Option::is_none")]
    pub collector_index: Option<u32>,
    /// Partition-affine routing: one exclusive consumer per subject. On by
    /// default whenever a collector fleet has more than one member; turning
    /// it off makes the fleet compete on the base queue (groups fragment).
    #[serde(rename = "ONE_CONSUMER_PER_SUBJECT", skip_serializing_if = "Option::is_none")]
    pub one_consumer_per_subject: Option<bool>,
    /// Lease seconds for this stage's input queue(s); fractions allowed.
    #[serde(rename = "ACK_WAIT", skip_serializing_if = "Option::is_none")]
    pub ack_wait: Option<f64>,
    #[serde(rename = "MAX_DEPTH", skip_serializing_if = "Option::is_none")]
    pub max_depth: Option<u64>,
    #[serde(rename = "PRIORITY_FIELD", skip_serializing_if = "Option::is_none")]
    pub priority_field: Option<String>,
    /// Marks this stage's output as a pipeline end.
    #[serde(rename = "TERMINAL", skip_serializing_if = "Option::is_none")]
    pub terminal: Option<bool>,
}

impl StageConfig {
    fn dispatcher(input: &str, output: &str, executor: &str) -> StageConfig {
        StageConfig {
            kind: Some(StageKind::Dispatcher),
            input_queue: QueueRef::One(input.to_string()),
            output_queue: Some(output.to_string()),
            executor: Some(executor.to_string()),
            replicas: None,
            strategy: None,
            num_inputs: None,
            grouping_field: None,
            collect_timeout_period_millis: None,
            num_collectors: None,
            collector_index: None,
            one_consumer_per_subject: None,
            ack_wait: None,
            max_depth: None,
            priority_field: None,
            terminal: None,
        }
    }

    fn collector(input: &str, output: &str, k: u64) -> StageConfig {
        StageConfig {
            kind: Some(StageKind::Collector),
            input_queue: QueueRef::One(input.to_string()),
            output_queue: Some(output.to_string()),
            executor: None,
            replicas: None,
            strategy: None,
            num_inputs: Some(k),
            grouping_field: None,
            collect_timeout_period_millis: None,
            num_collectors: None,
            collector_index: None,
            one_consumer_per_subject: None,
            ack_wait: None,
            max_depth: None,
            priority_field: None,
            terminal: None,
        }
    }

    pub fn kind(&self) -> StageKind {
        self.kind.unwrap_or(if self.executor.is_some() {
            StageKind::Dispatcher
        } else {
            StageKind::Collector
        })
    }

    /// Whether this collector stage routes by partition subjects.
    pub fn partitioned(&self) -> bool {
        self.one_consumer_per_subject
            .unwrap_or(self.num_collectors.unwrap_or(1) > 1)
    }

    fn grouping(&self) -> &str {
        self.grouping_field.as_deref().unwrap_or("block_num")
    }

    /// Set one UPPERCASE key from its string form (the env-override path).
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse()
                .map_err(|_| format!("bad value `{v}` for {key}"))
        }
        match key {
            "KIND" => {
                self.kind = Some(match value.to_ascii_lowercase().as_str() {
                    "dispatcher" => StageKind::Dispatcher,
                    "collector" => StageKind::Collector,
                    other => return Err(format!("unknown stage kind `{other}`")),
                })
            }
            "INPUT_QUEUE" => {
                let names: Vec<String> = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                self.input_queue = if names.len() == 1 {
                    QueueRef::One(names.into_iter().next().unwrap())
                } else {
                    QueueRef::Many(names)
                };
            }
            "OUTPUT_QUEUE" => self.output_queue = Some(value.to_string()),
            "EXECUTOR" => self.executor = Some(value.to_string()),
            "REPLICAS" => self.replicas = Some(num(key, value)?),
            "STRATEGY" => self.strategy = Some(value.to_string()),
            "NUM_INPUTS" => self.num_inputs = Some(num(key, value)?),
            "GROUPING_FIELD" => self.grouping_field = Some(value.to_string()),
            "COLLECT_TIMEOUT_PERIOD_MILLIS" => {
                self.collect_timeout_period_millis = Some(num(key, value)?)
            }
            "NUM_COLLECTORS" => self.num_collectors = Some(num(key, value)?),
            "COLLECTOR_INDEX" => self.collector_index = Some(num(key, value)?),
            "ONE_CONSUMER_PER_SUBJECT" => {
                self.one_consumer_per_subject = Some(matches!(value, "true" | "1" | "yes"))
            }
            "ACK_WAIT" => self.ack_wait = Some(num(key, value)?),
            "MAX_DEPTH" => self.max_depth = Some(num(key, value)?),
            "PRIORITY_FIELD" => self.priority_field = Some(value.to_string()),
            "TERMINAL" => self.terminal = Some(matches!(value, "true" | "1" | "yes")),
            other => return Err(format!("unknown stage key `{other}`")),
        }
        Ok(())
    }
}

/// A named set of stages. Launch and teardown follow [`dependency_order`]:
/// upstream stages spawn last and stop first, so producers quiesce before
/// their collectors drain.
///
/// [`dependency_order`]: PipelineConfig::dependency_order
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PipelineConfig {
    pub stages: BTreeMap<String, StageConfig>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<PipelineConfig, PipelineError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("stage config serializes")
    }

    /// Apply `<STAGE>__<KEY>` overrides from the process environment.
    pub fn apply_env(&mut self) -> Result<(), PipelineError> {
        self.apply_env_from(std::env::vars())
    }

    pub fn apply_env_from(
        &mut self,
        vars: impl Iterator<Item = (String, String)>,
    ) -> Result<(), PipelineError> {
        for (name, value) in vars {
            let Some((stage_part, key)) = name.split_once("__") else {
                continue;
            };
            let Some(stage) = self
                .stages
                .iter_mut()
                .find(|(s, _)| s.eq_ignore_ascii_case(stage_part))
                .map(|(_, c)| c)
            else {
                continue;
            };
            stage
                .set_key(key, &value)
                .map_err(|e| PipelineError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Stage names sorted upstream-first: a stage whose output another stage
    /// consumes comes before it. Ties (and cycles) break alphabetically.
    pub fn dependency_order(&self) -> Vec<String> {
        use std::collections::BTreeSet;
        let mut remaining: BTreeSet<&String> = self.stages.keys().collect();
        let mut order = Vec::with_capacity(remaining.len());
        while !remaining.is_empty() {
            // Ready = no remaining stage feeds one of my input queues.
            let next = remaining
                .iter()
                .find(|name| {
                    let inputs = self.stages[**name].input_queue.names();
                    !remaining.iter().any(|other| {
                        *other != **name
                            && self.stages[*other]
                                .output_queue
                                .as_ref()
                                .is_some_and(|out| inputs.iter().any(|q| q == out))
                    })
                })
                .copied()
                // A cycle: fall back to alphabetical to keep making progress.
                .unwrap_or_else(|| remaining.iter().next().copied().unwrap());
            remaining.remove(next);
            order.push(next.clone());
        }
        order
    }
}

// ---------------------------------------------------------------------------
// Launch
// ---------------------------------------------------------------------------

/// Process-level wiring a config can't carry: code registries and
/// observability sinks.
#[derive(Default)]
pub struct PipelineOptions {
    pub executors: InProcessRegistry,
    pub strategies: Option<StrategyRegistry>,
    pub metrics: Option<MetricsRegistry>,
    pub spans: Option<SpanLog>,
    /// Directory for durable per-stage idempotency logs; `None` keeps them
    /// in memory (still shared across a stage's replicas).
    pub idempotency_dir: Option<PathBuf>,
}

struct DispatcherRuntime {
    stage: String,
    config: StageConfig,
    executor: Arc<dyn TaskExecutor>,
    store: ResultStore,
    routing: Option<OutputRouting>,
    workers: Vec<(DispatcherHandle, KillSwitch)>,
}

struct CollectorRuntime {
    stage: String,
    config: StageConfig,
    routing: Option<Arc<RoutingState>>,
    routing_out: Option<OutputRouting>,
    registry: Option<StrategyRegistry>,
    collectors: Vec<(u32, CollectorHandle)>,
}

enum StageRuntime {
    Dispatcher(DispatcherRuntime),
    Collector(CollectorRuntime),
}

/// Publisher that routes toward a partitioned consumer the same way the
/// pipeline's own producers do. `publish` on an unpartitioned queue is a
/// plain publish.
#[derive(Clone)]
pub struct RoutedPublisher {
    bus: Bus,
    queue: String,
    routing: Option<(String, u32)>,
}

impl RoutedPublisher {
    pub fn publish(
        &self,
        payload: Payload,
        headers: BTreeMap<String, String>,
    ) -> Result<u64, BusError> {
        let subject = match &self.routing {
            None => self.queue.clone(),
            Some((field, parts)) => match extract_group_key(&payload, field) {
                Ok(key) => partition_subject(&self.queue, partition_for_key(key, *parts)),
                Err(_) => self.queue.clone(),
            },
        };
        self.bus.publish(&subject, payload, headers)
    }

    pub fn queue(&self) -> &str {
        &self.queue
    }
}

/// Final accounting for one stage after teardown.
#[derive(Debug, Clone)]
pub enum StageReport {
    Dispatcher {
        stage: String,
        workers: Vec<DispatcherStats>,
    },
    Collector {
        stage: String,
        collectors: Vec<(CollectorStats, Option<DrainOutcome>)>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
}

impl PipelineReport {
    /// Tasks processed by dispatchers, summed per stage name.
    pub fn processed(&self, stage: &str) -> u64 {
        self.stages
            .iter()
            .filter_map(|s| match s {
                StageReport::Dispatcher { stage: name, workers } if name == stage => {
                    Some(workers.iter().map(|w| w.processed).sum::<u64>())
                }
                _ => None,
            })
            .sum()
    }

    pub fn barriers(&self, stage: &str) -> u64 {
        self.stages
            .iter()
            .filter_map(|s| match s {
                StageReport::Collector { stage: name, collectors } if name == stage => Some(
                    collectors.iter().map(|(c, _)| c.barriers).sum::<u64>(),
                ),
                _ => None,
            })
            .sum()
    }
}

/// A running pipeline. Dropping the handle without `stop()` abandons the
/// threads (they keep serving the bus); stopping tears stages down in
/// declaration order and reports their totals.
pub struct Pipeline {
    bus: Bus,
    stages: Vec<StageRuntime>,
    /// queue → (grouping field, original partitions) for producers.
    routes: BTreeMap<String, (String, u32)>,
    opts: PipelineOptions,
}

impl Pipeline {
    pub fn launch(
        bus: &Bus,
        mut config: PipelineConfig,
        opts: PipelineOptions,
    ) -> Result<Pipeline, PipelineError> {
        config.apply_env()?;
        let order = config.dependency_order();

        // Pass 1: queue configs. A stage configures its own input queue(s);
        // output queues materialize with defaults unless some stage also
        // consumes them. Terminal stages mark their outputs.
        let mut queue_cfgs: BTreeMap<String, QueueConfig> = BTreeMap::new();
        for name in &order {
            let stage = &config.stages[name];
            for q in stage.input_queue.names() {
                let mut qc = queue_cfgs
                    .remove(&q)
                    .unwrap_or_else(|| QueueConfig::new(&q));
                if let Some(secs) = stage.ack_wait {
                    qc = qc.ack_wait(Duration::from_secs_f64(secs));
                }
                if let Some(d) = stage.max_depth {
                    qc = qc.depth_cap(d as usize);
                }
                if let Some(f) = &stage.priority_field {
                    qc = qc.priority(f.clone());
                }
                queue_cfgs.insert(q, qc);
            }
            if let Some(out) = &stage.output_queue {
                let mut qc = queue_cfgs
                    .remove(out)
                    .unwrap_or_else(|| QueueConfig::new(out));
                if stage.terminal.unwrap_or(false) {
                    qc = qc.terminal();
                }
                queue_cfgs.insert(out.clone(), qc);
            }
        }

        // Pass 2: routing map — which queues feed a partitioned collector.
        let mut routes: BTreeMap<String, (String, u32)> = BTreeMap::new();
        for name in &order {
            let stage = &config.stages[name];
            if stage.kind() == StageKind::Collector && stage.partitioned() {
                let parts = stage.num_collectors.unwrap_or(1).max(1);
                for q in stage.input_queue.names() {
                    routes.insert(q, (stage.grouping().to_string(), parts));
                }
            }
        }

        // Create base queues, then partition subjects (inheriting the base
        // queue's lease/priority settings so partitions behave identically).
        for (q, qc) in &queue_cfgs {
            bus.ensure_queue(qc.clone())?;
            if let Some((_, parts)) = routes.get(q) {
                for j in 0..*parts {
                    let mut pc = qc.clone();
                    pc.name = partition_subject(q, j);
                    bus.ensure_queue(pc)?;
                }
            }
        }

        // Pass 3: spawn, collectors before the dispatchers that feed them.
        let mut stages = Vec::new();
        for name in order.iter().rev() {
            let stage_cfg = config.stages[name].clone();
            let runtime = match stage_cfg.kind() {
                StageKind::Collector => StageRuntime::Collector(launch_collector_stage(
                    bus, name, stage_cfg, &opts, &routes,
                )?),
                StageKind::Dispatcher => StageRuntime::Dispatcher(launch_dispatcher_stage(
                    bus, name, stage_cfg, &opts, &routes,
                )?),
            };
            stages.push(runtime);
        }
        stages.reverse(); // back to declaration order for teardown
        Ok(Pipeline {
            bus: bus.clone(),
            stages,
            routes,
            opts,
        })
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    /// A publisher that follows this pipeline's routing for `queue`.
    pub fn publisher(&self, queue: &str) -> RoutedPublisher {
        RoutedPublisher {
            bus: self.bus.clone(),
            queue: queue.to_string(),
            routing: self.routes.get(queue).cloned(),
        }
    }

    /// The shared fleet geometry of a partitioned collector stage.
    pub fn collector_routing(&self, stage: &str) -> Option<Arc<RoutingState>> {
        self.stages.iter().find_map(|s| match s {
            StageRuntime::Collector(c) if c.stage == stage => c.routing.clone(),
            _ => None,
        })
    }

    /// Shrink (or re-grow, up to the original size) a collector fleet.
    /// Retired collectors drain and exit; survivors take over their
    /// partitions.
    pub fn scale_collectors(&self, stage: &str, active: u32) -> Result<(), PipelineError> {
        match self.collector_routing(stage) {
            Some(r) => {
                r.scale_to(active);
                Ok(())
            }
            None => Err(PipelineError::Config(format!(
                "`{stage}` is not a partitioned collector stage"
            ))),
        }
    }

    /// Simulate a crash of one dispatcher replica: it dies at its next
    /// checkpoint, leaving any claimed task to lease expiry.
    pub fn kill_dispatcher(&self, stage: &str, worker: usize) -> bool {
        for s in &self.stages {
            if let StageRuntime::Dispatcher(d) = s {
                if d.stage == stage {
                    if let Some((_, switch)) = d.workers.get(worker) {
                        switch.trigger();
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Simulate a crash of one collector: buffered members are abandoned
    /// unacknowledged.
    pub fn kill_collector(&self, stage: &str, index: usize) -> bool {
        for s in &self.stages {
            if let StageRuntime::Collector(c) = s {
                if c.stage == stage {
                    if let Some((_, h)) = c.collectors.get(index) {
                        h.kill();
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Start a replacement worker for a dispatcher stage.
    pub fn respawn_dispatcher(&mut self, stage: &str) -> Result<(), PipelineError> {
        let bus = self.bus.clone();
        let (metrics, spans) = (self.opts.metrics.clone(), self.opts.spans.clone());
        for s in &mut self.stages {
            if let StageRuntime::Dispatcher(d) = s {
                if d.stage == stage {
                    let (handle, switch) =
                        spawn_stage_worker(&bus, d, metrics.clone(), spans.clone())?;
                    d.workers.push((handle, switch));
                    return Ok(());
                }
            }
        }
        Err(PipelineError::Config(format!(
            "no dispatcher stage named `{stage}`"
        )))
    }

    /// Start a replacement collector with a given fleet index.
    pub fn respawn_collector(&mut self, stage: &str, index: u32) -> Result<(), PipelineError> {
        let bus = self.bus.clone();
        let (metrics, spans) = (self.opts.metrics.clone(), self.opts.spans.clone());
        for s in &mut self.stages {
            if let StageRuntime::Collector(c) = s {
                if c.stage == stage {
                    let handle = spawn_stage_collector(&bus, c, index, metrics, spans)?;
                    c.collectors.push((index, handle));
                    return Ok(());
                }
            }
        }
        Err(PipelineError::Config(format!(
            "no collector stage named `{stage}`"
        )))
    }

    /// Graceful teardown in declaration order: producers stop (finishing
    /// their current task) before their collectors drain.
    pub fn stop(self) -> PipelineReport {
        let mut report = PipelineReport::default();
        for s in self.stages {
            match s {
                StageRuntime::Dispatcher(d) => {
                    for (h, _) in &d.workers {
                        h.stop();
                    }
                    let workers: Vec<DispatcherStats> =
                        d.workers.into_iter().map(|(h, _)| h.join()).collect();
                    report.stages.push(StageReport::Dispatcher {
                        stage: d.stage,
                        workers,
                    });
                }
                StageRuntime::Collector(c) => {
                    for (_, h) in &c.collectors {
                        h.stop();
                    }
                    let collectors: Vec<(CollectorStats, Option<DrainOutcome>)> =
                        c.collectors.into_iter().map(|(_, h)| h.join()).collect();
                    report.stages.push(StageReport::Collector {
                        stage: c.stage,
                        collectors,
                    });
                }
            }
        }
        report
    }
}

fn launch_dispatcher_stage(
    bus: &Bus,
    name: &str,
    config: StageConfig,
    opts: &PipelineOptions,
    routes: &BTreeMap<String, (String, u32)>,
) -> Result<DispatcherRuntime, PipelineError> {
    let spec = ExecutorSpec::parse(config.executor.as_deref().unwrap_or("sim:echo"))
        .map_err(PipelineError::Config)?;
    let executor = spec
        .build(&opts.executors)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let store = match &opts.idempotency_dir {
        Some(dir) => ResultStore::durable(dir.join(format!("{name}.log")))?,
        None => ResultStore::in_memory(),
    };
    let routing = config.output_queue.as_ref().and_then(|out| {
        routes.get(out).map(|(field, parts)| OutputRouting {
            grouping_field: field.clone(),
            num_partitions: *parts,
        })
    });
    let mut runtime = DispatcherRuntime {
        stage: name.to_string(),
        config,
        executor,
        store,
        routing,
        workers: Vec::new(),
    };
    for _ in 0..runtime.config.replicas.unwrap_or(1).max(1) {
        let w = spawn_stage_worker(bus, &runtime, opts.metrics.clone(), opts.spans.clone())?;
        runtime.workers.push(w);
    }
    Ok(runtime)
}

fn spawn_stage_worker(
    bus: &Bus,
    d: &DispatcherRuntime,
    metrics: Option<MetricsRegistry>,
    spans: Option<SpanLog>,
) -> Result<(DispatcherHandle, KillSwitch), PipelineError> {
    let switch = KillSwitch::new();
    let mut opts = DispatcherOptions::new(
        &d.stage,
        d.config.input_queue.first(),
        d.config.output_queue.clone().unwrap_or_default(),
        d.executor.clone(),
    );
    if d.config.output_queue.is_none() {
        opts.output_queue = None;
    }
    opts.result_store = Some(d.store.clone());
    opts.routing = d.routing.clone();
    opts.fault = Some(Fault::new(FaultSite::BeforePublish, switch.clone()));
    opts.metrics = metrics;
    opts.spans = spans;
    let handle = spawn_dispatcher(bus, opts)?;
    Ok((handle, switch))
}

fn launch_collector_stage(
    bus: &Bus,
    name: &str,
    config: StageConfig,
    opts: &PipelineOptions,
    routes: &BTreeMap<String, (String, u32)>,
) -> Result<CollectorRuntime, PipelineError> {
    let fleet = config.num_collectors.unwrap_or(1).max(1);
    let routing = if config.partitioned() {
        Some(Arc::new(RoutingState::new(fleet)))
    } else {
        None
    };
    let routing_out = config.output_queue.as_ref().and_then(|out| {
        routes.get(out).map(|(field, parts)| OutputRouting {
            grouping_field: field.clone(),
            num_partitions: *parts,
        })
    });
    let mut runtime = CollectorRuntime {
        stage: name.to_string(),
        config,
        routing,
        routing_out,
        registry: opts.strategies.clone(),
        collectors: Vec::new(),
    };
    let indices: Vec<u32> = match runtime.config.collector_index {
        Some(i) => vec![i],
        None => (0..fleet).collect(),
    };
    for i in indices {
        let h = spawn_stage_collector(bus, &runtime, i, opts.metrics.clone(), opts.spans.clone())?;
        runtime.collectors.push((i, h));
    }
    Ok(runtime)
}

fn spawn_stage_collector(
    bus: &Bus,
    c: &CollectorRuntime,
    index: u32,
    metrics: Option<MetricsRegistry>,
    spans: Option<SpanLog>,
) -> Result<CollectorHandle, PipelineError> {
    let cfg = &c.config;
    let inputs = cfg.input_queue.names();
    let mut copts = CollectorOptions::new(
        &c.stage,
        &inputs[0],
        cfg.output_queue.clone().unwrap_or_default(),
    );
    if cfg.output_queue.is_none() {
        copts.output_queue = None;
    }
    for extra in &inputs[1..] {
        copts = copts.join_also(extra.clone());
    }
    copts = copts
        .strategy(StrategySpec::parse(cfg.strategy.as_deref().unwrap_or("match")))
        .grouping(cfg.grouping().to_string())
        .inputs(cfg.num_inputs.unwrap_or(1))
        .timeout(Duration::from_millis(
            cfg.collect_timeout_period_millis.unwrap_or(30_000),
        ));
    copts.registry = c.registry.clone();
    if let Some(routing) = &c.routing {
        copts = copts.partitioned(PartitionPlan {
            index,
            routing: routing.clone(),
        });
    }
    copts.output_routing = c.routing_out.clone();
    copts.metrics = metrics;
    copts.spans = spans;
    Ok(spawn_collector(bus, copts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::BusOptions;
    use std::time::Instant;

    fn auto_bus() -> Bus {
        Bus::open(BusOptions::in_memory().ack_timeout(Duration::from_millis(500))).unwrap()
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

    const FULL_DOC: &str = r#"
[prove]
KIND = "dispatcher"
INPUT_QUEUE = "witnesses"
OUTPUT_QUEUE = "proofs"
EXECUTOR = "sim:delay:prove_millis"
REPLICAS = 4
ACK_WAIT = 2.5
MAX_DEPTH = 1000
PRIORITY_FIELD = "block_num"

[aggregate]
KIND = "collector"
INPUT_QUEUE = "proofs"
OUTPUT_QUEUE = "batches"
STRATEGY = "match"
NUM_INPUTS = 8
GROUPING_FIELD = "block_num"
COLLECT_TIMEOUT_PERIOD_MILLIS = 15000
NUM_COLLECTORS = 4
ONE_CONSUMER_PER_SUBJECT = true
TERMINAL = true
"#;

    #[test]
    fn toml_round_trip_covers_every_key() {
        let cfg = PipelineConfig::from_toml(FULL_DOC).unwrap();
        assert_eq!(cfg.stages.len(), 2);
        let prove = &cfg.stages["prove"];
        assert_eq!(prove.kind(), StageKind::Dispatcher);
        assert_eq!(prove.input_queue.first(), "witnesses");
        assert_eq!(prove.replicas, Some(4));
        assert_eq!(prove.ack_wait, Some(2.5));
        assert_eq!(prove.max_depth, Some(1000));
        assert_eq!(prove.priority_field.as_deref(), Some("block_num"));
        let agg = &cfg.stages["aggregate"];
        assert_eq!(agg.kind(), StageKind::Collector);
        assert_eq!(agg.num_inputs, Some(8));
        assert_eq!(agg.num_collectors, Some(4));
        assert_eq!(agg.collect_timeout_period_millis, Some(15000));
        assert!(agg.partitioned());
        assert_eq!(agg.terminal, Some(true));
        // Serialized form parses back identically.
        let again = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again.stages["aggregate"].num_inputs, Some(8));
        assert_eq!(again.stages["prove"].executor.as_deref(), Some("sim:delay:prove_millis"));
    }

    #[test]
    fn kind_is_inferred_from_executor_presence() {
        let cfg = PipelineConfig::from_toml(
            r#"
[exec]
INPUT_QUEUE = "a"
OUTPUT_QUEUE = "b"
EXECUTOR = "sim:echo"

[collect]
INPUT_QUEUE = "b"
OUTPUT_QUEUE = "c"
NUM_INPUTS = 2
"#,
        )
        .unwrap();
        assert_eq!(cfg.stages["exec"].kind(), StageKind::Dispatcher);
        assert_eq!(cfg.stages["collect"].kind(), StageKind::Collector);
    }

    #[test]
    fn multi_queue_inputs_parse_from_arrays() {
        let cfg = PipelineConfig::from_toml(
            r#"
[join]
INPUT_QUEUE = ["thin_proofs", "batches"]
OUTPUT_QUEUE = "joined"
NUM_INPUTS = 9
"#,
        )
        .unwrap();
        assert_eq!(
            cfg.stages["join"].input_queue.names(),
            vec!["thin_proofs".to_string(), "batches".to_string()]
        );
    }

    #[test]
    fn unknown_keys_are_refused() {
        assert!(PipelineConfig::from_toml("[s]\nINPUT_QUEUE = \"a\"\nBOGUS = 1\n").is_err());
    }

    #[test]
    fn environment_overrides_rewrite_stage_keys() {
        let mut cfg = PipelineConfig::from_toml(FULL_DOC).unwrap();
        cfg.apply_env_from(
            vec![
                ("PROVE__REPLICAS".to_string(), "8".to_string()),
                ("AGGREGATE__NUM_COLLECTORS".to_string(), "2".to_string()),
                ("AGGREGATE__ONE_CONSUMER_PER_SUBJECT".to_string(), "false".to_string()),
                ("PROVE__ACK_WAIT".to_string(), "0.25".to_string()),
                ("UNRELATED_VAR".to_string(), "ignored".to_string()),
                ("NOSUCHSTAGE__REPLICAS".to_string(), "3".to_string()),
            ]
            .into_iter(),
        )
        .unwrap();
        assert_eq!(cfg.stages["prove"].replicas, Some(8));
        assert_eq!(cfg.stages["prove"].ack_wait, Some(0.25));
        assert_eq!(cfg.stages["aggregate"].num_collectors, Some(2));
        assert!(!cfg.stages["aggregate"].partitioned());
    }

    #[test]
    fn bad_override_values_error_with_the_variable_name() {
        let mut cfg = PipelineConfig::from_toml(FULL_DOC).unwrap();
        let err = cfg
            .apply_env_from(vec![("PROVE__REPLICAS".to_string(), "many".to_string())].into_iter())
            .unwrap_err();
        assert!(err.to_string().contains("PROVE__REPLICAS"));
    }

    #[test]
    fn single_chain_processes_end_to_end() {
        let bus = auto_bus();
        let p = Pipeline::launch(&bus, single_chain(), PipelineOptions::default()).unwrap();
        for i in 0..3 {
            p.publisher("tasks")
                .publish(
                    Payload::new().with("block_num", i as i64).with("task_id", format!("t-{i}")),
                    BTreeMap::new(),
                )
                .unwrap();
        }
        assert!(wait_until(Duration::from_secs(5), || {
            bus.stream_state("proofs").unwrap().depth == 3
        }));
        let report = p.stop();
        assert_eq!(report.processed("exec"), 3);
    }

    #[test]
    fn fan_in_routes_and_aggregates_whole_blocks() {
        let bus = auto_bus();
        let p = Pipeline::launch(&bus, fan_in(3, 2), PipelineOptions::default()).unwrap();
        let publisher = p.publisher("tasks");
        for block in 0..2i64 {
            for i in 0..3i64 {
                publisher
                    .publish(
                        Payload::new()
                            .with("block_num", block)
                            .with("task_index", i)
                            .with("task_id", format!("b{block}-t{i}")),
                        BTreeMap::new(),
                    )
                    .unwrap();
            }
        }
        assert!(wait_until(Duration::from_secs(5), || {
            bus.stream_state("batches").unwrap().depth == 2
        }));
        let c = bus
            .consumer(crate::bus::ConsumerHandle::new("batches").group("check"))
            .unwrap();
        let d = c.try_next().unwrap().unwrap();
        assert_eq!(d.envelope.payload.get_bool("complete"), Some(true));
        assert_eq!(d.envelope.payload.get_int("member_count"), Some(3));
        let report = p.stop();
        assert_eq!(report.barriers("aggregate"), 2);
    }

    #[test]
    fn tasks_route_through_exec_to_the_partitioned_collector() {
        // The dispatcher's outputs land on partition subjects, not the base
        // queue: affinity survives the executor hop.
        let bus = auto_bus();
        let p = Pipeline::launch(&bus, fan_in(2, 2), PipelineOptions::default()).unwrap();
        let publisher = p.publisher("tasks");
        for i in 0..2i64 {
            publisher
                .publish(
                    Payload::new()
                        .with("block_num", 5i64)
                        .with("task_index", i)
                        .with("task_id", format!("b5-t{i}")),
                    BTreeMap::new(),
                )
                .unwrap();
        }
        assert!(wait_until(Duration::from_secs(5), || {
            bus.stream_state("batches").unwrap().depth == 1
        }));
        // Block 5 hashes to partition 1 of 2; nothing should touch p0.
        assert!(bus.stream_state("proofs.p1").unwrap().delivered_total >= 2);
        assert_eq!(bus.stream_state("proofs.p0").unwrap().delivered_total, 0);
        p.stop();
    }

    #[test]
    fn collector_index_launches_a_single_fleet_member() {
        let bus = auto_bus();
        let mut cfg = fan_in(2, 2);
        cfg.stages.get_mut("aggregate").unwrap().collector_index = Some(1);
        let p = Pipeline::launch(&bus, cfg, PipelineOptions::default()).unwrap();
        // Partition 1 traffic aggregates; partition 0 has no collector here.
        let publisher = p.publisher("tasks");
        for i in 0..2i64 {
            publisher
                .publish(
                    Payload::new()
                        .with("block_num", 5i64) // 5 mod 2 = partition 1
                        .with("task_index", i)
                        .with("task_id", format!("b5-t{i}")),
                    BTreeMap::new(),
                )
                .unwrap();
        }
        assert!(wait_until(Duration::from_secs(5), || {
            bus.stream_state("batches").unwrap().depth == 1
        }));
        let report = p.stop();
        assert_eq!(report.barriers("aggregate"), 1);
    }

    #[test]
    fn scale_down_keeps_aggregating_through_takeover() {
        let bus = auto_bus();
        let p = Pipeline::launch(&bus, fan_in(2, 2), PipelineOptions::default()).unwrap();
        p.scale_collectors("aggregate", 1).unwrap();
        // Block 5 still routes to p1 (producers use the original map), but
        // collector 0 now owns p1 by takeover.
        let publisher = p.publisher("tasks");
        for i in 0..2i64 {
            publisher
                .publish(
                    Payload::new()
                        .with("block_num", 5i64)
                        .with("task_index", i)
                        .with("task_id", format!("b5-t{i}")),
                    BTreeMap::new(),
                )
                .unwrap();
        }
        assert!(wait_until(Duration::from_secs(5), || {
            bus.stream_state("batches").unwrap().depth == 1
        }));
        p.stop();
    }

    #[test]
    fn killed_dispatcher_is_replaced_and_work_survives() {
        let bus = Bus::open(BusOptions::in_memory().ack_timeout(Duration::from_millis(200))).unwrap();
        let mut cfg = single_chain();
        cfg.stages.get_mut("exec").unwrap().executor = Some("sim:sleep:80".to_string());
        let mut p = Pipeline::launch(&bus, cfg, PipelineOptions::default()).unwrap();
        p.publisher("tasks")
            .publish(
                Payload::new().with("block_num", 1i64).with("task_id", "t-1"),
                BTreeMap::new(),
            )
            .unwrap();
        assert!(wait_until(Duration::from_secs(2), || {
            bus.stream_state("tasks").unwrap().inflight == 1
        }));
        assert!(p.kill_dispatcher("exec", 0));
        p.respawn_dispatcher("exec").unwrap();
        assert!(wait_until(Duration::from_secs(5), || {
            bus.stream_state("proofs").unwrap().depth == 1
        }));
        let report = p.stop();
        assert_eq!(report.processed("exec"), 1, "replacement finished the task");
    }
}
