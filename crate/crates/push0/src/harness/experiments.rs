//! Reference experiments: partition affinity under barrier fragmentation,
//! dual-track vs serialized pipelines, ordered commitment under random
//! delays, collector buffering under cross-track skew, dedup bookkeeping,
//! and backpressure.
//!
//! Each experiment builds its topology on a fresh in-memory bus, injects a
//! seeded workload, measures on the monotonic clock, and returns an
//! [`ExperimentReport`] whose verdicts carry the pinned thresholds.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bus::{Bus, QueueConfig};
use crate::collector::{
    partition_subject, spawn_collector, CollectorHandle, CollectorOptions, CollectorStats,
    OrderedCommitStrategy, PartitionPlan, RoutingState, StrategyRegistry, StrategySpec,
};
use crate::dispatcher::{spawn_dispatcher, DispatcherHandle, DispatcherOptions};
use crate::executor::{SimBehavior, SimExecutor};
use crate::harness::report::{ExperimentReport, RunRecord};
use crate::harness::{rng, wait_for, Audit, TaskProbe};
use crate::model::extract_group_key;
use crate::payload::{Payload, Value};

/// Completion ceiling for the shared-group control at the reference shape
/// (4 collectors, 4 fragments, 100 barriers): per-barrier completion odds
/// are (1/4)^3 ~ 1.56%, and 12 of 100 sits far outside the binomial
/// envelope's upper tail.
pub const SHARED_GROUP_COMPLETION_MAX: u64 = 12;

/// Dual-track vs serialized pipeline floors.
pub const MULTIQUEUE_SPEEDUP_MIN: f64 = 3.0;
pub const MULTIQUEUE_STALL_GAP_MIN: Duration = Duration::from_secs(12);
pub const MULTIQUEUE_SKEW_MIN: i64 = 20;

/// Generous lease for collector-input queues: members sit unacknowledged in
/// collector buffers until their barrier completes, and a mid-run lease
/// expiry would inject redeliveries the experiment did not ask for.
const COLLECT_ACK_WAIT: Duration = Duration::from_secs(300);
/// Effectively-disabled partial flush for experiments that count complete
/// barriers only.
const NO_PARTIAL: Duration = Duration::from_secs(300);

fn publish(bus: &Bus, subject: &str, payload: Payload) {
    bus.publish(subject, payload, Default::default())
        .expect("publish");
}

// ---------------------------------------------------------------------------
// Barrier fragmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Group-hash routing to partition subjects: all of a barrier's
    /// fragments land on the one collector that owns the group.
    Affine,
    /// The control: one shared worker group across all collectors, so
    /// fragments scatter and barriers almost never complete.
    RoundRobin,
}

impl RoutingMode {
    pub fn parse(s: &str) -> Result<RoutingMode, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "affine" => Ok(RoutingMode::Affine),
            "round_robin" | "round-robin" | "rr" => Ok(RoutingMode::RoundRobin),
            other => Err(format!("unknown routing mode `{other}`")),
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoutingMode::Affine => write!(f, "affine"),
            RoutingMode::RoundRobin => write!(f, "round_robin"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FragmentationParams {
    pub collectors: u32,
    /// Fragments per barrier.
    pub fragments: u32,
    pub barriers: u64,
    pub routing: RoutingMode,
}

impl Default for FragmentationParams {
    fn default() -> Self {
        FragmentationParams {
            collectors: 4,
            fragments: 4,
            barriers: 100,
            routing: RoutingMode::Affine,
        }
    }
}

/// Publish `fragments` members per barrier across a collector fleet, routed
/// either by group hash (every barrier completes) or through one shared
/// worker group (fragments scatter; a barrier completes only when chance
/// hands every fragment to the same collector).
pub fn exp_fragmentation(params: &FragmentationParams, seed: u64) -> ExperimentReport {
    let t_start = Instant::now();
    let c = params.collectors.max(1);
    let k = params.fragments.max(1);
    let p_single = (1.0 / c as f64).powi(k as i32 - 1);
    let mut report = ExperimentReport::new("fragmentation")
        .param("collectors", c)
        .param("fragments", k)
        .param("barriers", params.barriers)
        .param("routing", params.routing)
        .param("seed", seed)
        .param("single_collector_probability", format!("{p_single:.4}"));

    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("frag_proofs").ack_wait(COLLECT_ACK_WAIT))
        .expect("queue");
    for p in 0..c {
        bus.ensure_queue(
            QueueConfig::new(partition_subject("frag_proofs", p)).ack_wait(COLLECT_ACK_WAIT),
        )
        .expect("queue");
    }
    bus.ensure_queue(QueueConfig::new("frag_barriers").terminal())
        .expect("queue");
    let audit = Audit::attach(&bus, "frag_barriers").expect("audit");

    let routing = Arc::new(RoutingState::new(c));
    let collectors: Vec<CollectorHandle> = (0..c)
        .map(|i| {
            let mut opts = CollectorOptions::new("frag", "frag_proofs", "frag_barriers")
                .inputs(k as u64)
                .grouping("block_num")
                .timeout(NO_PARTIAL)
                .window(4096);
            if params.routing == RoutingMode::Affine {
                opts = opts.partitioned(PartitionPlan {
                    index: i,
                    routing: routing.clone(),
                });
            }
            spawn_collector(&bus, opts).expect("spawn collector")
        })
        .collect();

    // Build the full injection plan, then shuffle it so fragments of one
    // barrier are interleaved with everyone else's the way concurrent
    // upstream dispatchers would interleave them.
    let mut plan: Vec<(String, Payload)> = Vec::with_capacity((params.barriers * k as u64) as usize);
    for b in 0..params.barriers {
        for t in 0..k {
            let payload = Payload::new()
                .with("block_num", b as i64)
                .with("task_index", t as i64)
                .with("task_id", format!("frag-b{b}-t{t}"));
            let subject = match params.routing {
                RoutingMode::Affine => {
                    let key = extract_group_key(&payload, "block_num").expect("group key");
                    partition_subject("frag_proofs", (key % c as u64) as u32)
                }
                RoutingMode::RoundRobin => "frag_proofs".to_string(),
            };
            plan.push((subject, payload));
        }
    }
    plan.shuffle(&mut rng(seed));
    for (subject, payload) in plan {
        publish(&bus, &subject, payload);
        if params.routing == RoutingMode::RoundRobin {
            // Pace the control so each fragment is claimed by whichever
            // collector polls next rather than letting one thread sweep a
            // burst; affine routing is assignment-invariant and can burst.
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    let total = params.barriers * k as u64;
    match params.routing {
        RoutingMode::Affine => {
            // Every barrier completes; wait for the emissions themselves.
            wait_for(Duration::from_secs(50), Duration::from_millis(5), || {
                audit.len() as u64 >= params.barriers
            });
        }
        RoutingMode::RoundRobin => {
            // Nothing guarantees completion; wait until every fragment has
            // been delivered somewhere, then let stragglers settle.
            wait_for(Duration::from_secs(50), Duration::from_millis(5), || {
                bus.stream_state("frag_proofs")
                    .map(|s| s.delivered_total >= total)
                    .unwrap_or(false)
            });
            std::thread::sleep(Duration::from_millis(500));
        }
    }

    let completed: std::collections::BTreeSet<i64> = audit
        .records()
        .iter()
        .filter(|p| p.get_bool("complete") == Some(true))
        .filter_map(|p| p.get_int("block_num"))
        .collect();
    let completions = completed.len() as u64;

    // Incomplete groups hold their members deliberately; teardown must not
    // wait out a drain grace that can never fire.
    let mut stats = CollectorStats::default();
    for h in collectors {
        h.kill();
        let (s, _) = h.join();
        stats = sum_stats(stats, s);
    }
    audit.stop();

    report.runs.push(
        RunRecord::new(format!("{}", params.routing))
            .value("completions", completions as f64)
            .value("barriers", params.barriers as f64)
            .value("members_accepted", stats.members as f64)
            .value("rejected", stats.rejected as f64)
            .value("expected_completion_probability", p_single),
    );
    report.summary.completed = Some(completions);
    report.summary.total = Some(params.barriers);

    if params.routing == RoutingMode::Affine || p_single >= 1.0 {
        report.check(
            "all barriers complete",
            completions == params.barriers,
            format!("{completions}/{}", params.barriers),
        );
        report.check("no misroutes", stats.rejected == 0, format!("{} rejected", stats.rejected));
    } else {
        let max_allowed = if (c, k, params.barriers) == (4, 4, 100) {
            SHARED_GROUP_COMPLETION_MAX
        } else {
            let mean = params.barriers as f64 * p_single;
            let sd = (params.barriers as f64 * p_single * (1.0 - p_single)).sqrt();
            (mean + 6.0 * sd).ceil() as u64 + 3
        };
        report.check(
            "fragmentation starves barriers",
            completions <= max_allowed,
            format!("{completions}/{} <= {max_allowed}", params.barriers),
        );
    }

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

fn sum_stats(a: CollectorStats, b: CollectorStats) -> CollectorStats {
    CollectorStats {
        members: a.members + b.members,
        barriers: a.barriers + b.barriers,
        partial_flushes: a.partial_flushes + b.partial_flushes,
        duplicate_drops: a.duplicate_drops + b.duplicate_drops,
        rejected: a.rejected + b.rejected,
        skipped: a.skipped + b.skipped,
        lease_refreshes: a.lease_refreshes + b.lease_refreshes,
        peak_buffered_members: a.peak_buffered_members.max(b.peak_buffered_members),
        peak_buffered_bytes: a.peak_buffered_bytes.max(b.peak_buffered_bytes),
    }
}


// ---------------------------------------------------------------------------
// Dual-track vs serialized pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// Dual-track: proposals and proofs on independent queues, joined by a
    /// barrier collector per block.
    Multi,
    /// Serialized control: one queue, one worker, and block n+1's proposal
    /// held back until block n's barrier completes.
    Linear,
}

impl PipelineMode {
    pub fn parse(s: &str) -> Result<PipelineMode, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "multi" => Ok(PipelineMode::Multi),
            "linear" => Ok(PipelineMode::Linear),
            other => Err(format!("unknown pipeline mode `{other}`")),
        }
    }
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PipelineMode::Multi => write!(f, "multi"),
            PipelineMode::Linear => write!(f, "linear"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiQueueParams {
    pub blocks: u64,
    pub proofs_per_block: u64,
    pub proposer_latency: Duration,
    pub prover_latency: Duration,
    pub prover_replicas: usize,
    /// One proof task (`task_index` 0 of the given block) runs this much
    /// longer — a reproducible straggler.
    pub poison: Option<PoisonSpec>,
    pub mode: PipelineMode,
}

#[derive(Debug, Clone, Copy)]
pub struct PoisonSpec {
    pub block: i64,
    pub extra: Duration,
}

impl Default for MultiQueueParams {
    fn default() -> Self {
        MultiQueueParams {
            blocks: 30,
            proofs_per_block: 8,
            proposer_latency: Duration::from_millis(10),
            prover_latency: Duration::from_millis(300),
            prover_replicas: 4,
            poison: Some(PoisonSpec {
                block: 5,
                extra: Duration::from_secs(15),
            }),
            mode: PipelineMode::Multi,
        }
    }
}

struct MultiQueueOutcome {
    total: Duration,
    max_skew: i64,
    proposer_span: Option<Duration>,
    finalized: u64,
}

/// Each block needs one proposal and `proofs_per_block` proofs; a barrier
/// collector joins them. Multi mode lets the cheap proposal track run ahead
/// of proving (finality skew) so one poisoned proof stalls only its own
/// block; the serialized control stalls everything behind it.
pub fn exp_multiqueue(params: &MultiQueueParams) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("multiqueue")
        .param("blocks", params.blocks)
        .param("proofs_per_block", params.proofs_per_block)
        .param("proposer_latency_ms", params.proposer_latency.as_millis())
        .param("prover_latency_ms", params.prover_latency.as_millis())
        .param("prover_replicas", params.prover_replicas)
        .param(
            "poison",
            match &params.poison {
                Some(p) => format!("block {} +{}ms", p.block, p.extra.as_millis()),
                None => "none".to_string(),
            },
        )
        .param("mode", params.mode);

    let outcome = match params.mode {
        PipelineMode::Multi => run_multi(params),
        PipelineMode::Linear => run_linear(params),
    };

    let mut run = RunRecord::new(format!("{}", params.mode))
        .value("total_s", outcome.total.as_secs_f64())
        .value("max_finality_skew", outcome.max_skew as f64)
        .value("finalized", outcome.finalized as f64);
    if let Some(span) = outcome.proposer_span {
        run = run.value(
            "proposer_throughput",
            params.blocks as f64 / span.as_secs_f64(),
        );
    }
    report.runs.push(run);
    report.summary.completed = Some(outcome.finalized);
    report.summary.total = Some(params.blocks);

    report.check(
        "all blocks finalized",
        outcome.finalized == params.blocks,
        format!("{}/{}", outcome.finalized, params.blocks),
    );
    if params.mode == PipelineMode::Multi && params.poison.is_some() {
        report.check(
            "proposals run ahead during the stall",
            outcome.max_skew >= MULTIQUEUE_SKEW_MIN,
            format!("max skew {} >= {}", outcome.max_skew, MULTIQUEUE_SKEW_MIN),
        );
    }

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

/// Proposal and proof payloads for one block, delays baked in so both modes
/// execute the identical workload through a payload-driven prover.
fn block_workload(params: &MultiQueueParams, block: u64) -> (Payload, Vec<Payload>) {
    let proposal = Payload::new()
        .with("block_num", block as i64)
        .with("task_index", -1i64)
        .with("kind", "proposal")
        .with("latency_ms", params.proposer_latency.as_millis() as i64)
        .with("task_id", format!("prop-b{block}"));
    let proofs = (0..params.proofs_per_block)
        .map(|t| {
            let mut ms = params.prover_latency.as_millis() as i64;
            if let Some(p) = &params.poison {
                if p.block == block as i64 && t == 0 {
                    ms += p.extra.as_millis() as i64;
                }
            }
            Payload::new()
                .with("block_num", block as i64)
                .with("task_index", t as i64)
                .with("kind", "proof")
                .with("latency_ms", ms)
                .with("task_id", format!("proof-b{block}-t{t}"))
        })
        .collect();
    (proposal, proofs)
}

fn delay_executor() -> Arc<SimExecutor> {
    Arc::new(SimExecutor(SimBehavior::PayloadDelay {
        field: "latency_ms".to_string(),
    }))
}

/// Tracks finality skew: how many blocks the proposal track has finished
/// beyond the oldest unfinalized block.
struct SkewWatch {
    max_skew: i64,
    proposals_done_at: Option<Instant>,
}

fn watch_skew(
    proposals: Arc<Audit>,
    finalized: Arc<Audit>,
    blocks: u64,
    t0: Instant,
    stop: Arc<AtomicBool>,
) -> std::thread::JoinHandle<SkewWatch> {
    std::thread::spawn(move || {
        let mut watch = SkewWatch {
            max_skew: 0,
            proposals_done_at: None,
        };
        while !stop.load(Ordering::Relaxed) {
            let proposed = proposals
                .records()
                .iter()
                .filter(|p| p.get_str("kind") == Some("proposal"))
                .filter_map(|p| p.get_int("block_num"))
                .collect::<std::collections::BTreeSet<i64>>()
                .len() as i64;
            if proposed as u64 >= blocks && watch.proposals_done_at.is_none() {
                watch.proposals_done_at = Some(Instant::now().max(t0));
            }
            let done = finalized.distinct_int("block_num");
            let mut watermark = 0i64;
            while done.contains(&watermark) {
                watermark += 1;
            }
            watch.max_skew = watch.max_skew.max(proposed - watermark);
            std::thread::sleep(Duration::from_millis(2));
        }
        watch
    })
}

fn run_multi(params: &MultiQueueParams) -> MultiQueueOutcome {
    let bus = Bus::in_memory();
    for q in ["mq_proposals", "mq_proofs"] {
        bus.ensure_queue(QueueConfig::new(q)).expect("queue");
    }
    bus.ensure_queue(
        QueueConfig::new("mq_prove_tasks")
            .priority("block_num"),
    )
    .expect("queue");
    for q in ["mq_proposals_done", "mq_proofs_done"] {
        bus.ensure_queue(QueueConfig::new(q).ack_wait(COLLECT_ACK_WAIT))
            .expect("queue");
    }
    bus.ensure_queue(QueueConfig::new("mq_finalized").terminal())
        .expect("queue");

    let proposals_audit = Arc::new(Audit::attach(&bus, "mq_proposals_done").expect("audit"));
    let finalized_audit = Arc::new(Audit::attach(&bus, "mq_finalized").expect("audit"));

    let proposer = spawn_dispatcher(
        &bus,
        DispatcherOptions::new("proposer", "mq_proposals", "mq_proposals_done", delay_executor()),
    )
    .expect("spawn proposer");
    let provers: Vec<DispatcherHandle> = (0..params.prover_replicas)
        .map(|i| {
            spawn_dispatcher(
                &bus,
                DispatcherOptions::new(
                    format!("prover-{i}"),
                    "mq_prove_tasks",
                    "mq_proofs_done",
                    delay_executor(),
                ),
            )
            .expect("spawn prover")
        })
        .collect();
    let joiner = spawn_collector(
        &bus,
        CollectorOptions::new("finality", "mq_proposals_done", "mq_finalized")
            .join_also("mq_proofs_done")
            .inputs(1 + params.proofs_per_block)
            .grouping("block_num")
            .timeout(NO_PARTIAL)
            .window(4096),
    )
    .expect("spawn joiner");

    let t0 = Instant::now();
    let stop_watch = Arc::new(AtomicBool::new(false));
    let watcher = watch_skew(
        proposals_audit.clone(),
        finalized_audit.clone(),
        params.blocks,
        t0,
        stop_watch.clone(),
    );

    // Both tracks are loaded upfront; the queues decouple them.
    for b in 0..params.blocks {
        let (proposal, proofs) = block_workload(params, b);
        publish(&bus, "mq_proposals", proposal);
        for proof in proofs {
            publish(&bus, "mq_prove_tasks", proof);
        }
    }

    let work = params.blocks as f64
        * (params.proofs_per_block as f64 * params.prover_latency.as_secs_f64())
        / params.prover_replicas.max(1) as f64
        + params.poison.map(|p| p.extra.as_secs_f64()).unwrap_or(0.0);
    let budget = Duration::from_secs_f64(work * 2.0 + 60.0);
    wait_for(budget, Duration::from_millis(5), || {
        finalized_audit.distinct_int("block_num").len() as u64 >= params.blocks
    });
    let total = t0.elapsed();

    stop_watch.store(true, Ordering::Relaxed);
    let watch = watcher.join().expect("skew watcher");
    proposer.stop();
    for p in provers {
        p.stop();
    }
    joiner.stop();
    let finalized = finalized_audit.distinct_int("block_num").len() as u64;

    MultiQueueOutcome {
        total,
        max_skew: watch.max_skew,
        proposer_span: watch.proposals_done_at.map(|t| t - t0),
        finalized,
    }
}

fn run_linear(params: &MultiQueueParams) -> MultiQueueOutcome {
    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("lin_tasks")).expect("queue");
    bus.ensure_queue(QueueConfig::new("lin_done").ack_wait(COLLECT_ACK_WAIT))
        .expect("queue");
    bus.ensure_queue(QueueConfig::new("lin_finalized").terminal())
        .expect("queue");

    let done_audit = Arc::new(Audit::attach(&bus, "lin_done").expect("audit"));
    let finalized_audit = Arc::new(Audit::attach(&bus, "lin_finalized").expect("audit"));

    let worker = spawn_dispatcher(
        &bus,
        DispatcherOptions::new("serial", "lin_tasks", "lin_done", delay_executor()),
    )
    .expect("spawn worker");
    let joiner = spawn_collector(
        &bus,
        CollectorOptions::new("finality", "lin_done", "lin_finalized")
            .inputs(1 + params.proofs_per_block)
            .grouping("block_num")
            .timeout(NO_PARTIAL)
            .window(4096),
    )
    .expect("spawn joiner");

    let t0 = Instant::now();
    let stop_watch = Arc::new(AtomicBool::new(false));
    let watcher = watch_skew(
        done_audit.clone(),
        finalized_audit.clone(),
        params.blocks,
        t0,
        stop_watch.clone(),
    );

    let per_block = params.proposer_latency.as_secs_f64()
        + params.proofs_per_block as f64 * params.prover_latency.as_secs_f64();
    let poison_extra = params.poison.map(|p| p.extra.as_secs_f64()).unwrap_or(0.0);
    let block_budget = Duration::from_secs_f64(per_block * 3.0 + poison_extra + 30.0);

    // The gate: block b's tasks are withheld until block b-1's barrier.
    for b in 0..params.blocks {
        let (proposal, proofs) = block_workload(params, b);
        publish(&bus, "lin_tasks", proposal);
        for proof in proofs {
            publish(&bus, "lin_tasks", proof);
        }
        let finalized = finalized_audit.clone();
        let done = wait_for(block_budget, Duration::from_millis(5), move || {
            finalized.distinct_int("block_num").contains(&(b as i64))
        });
        if !done {
            break;
        }
    }
    let total = t0.elapsed();

    stop_watch.store(true, Ordering::Relaxed);
    let watch = watcher.join().expect("skew watcher");
    worker.stop();
    joiner.stop();
    let finalized = finalized_audit.distinct_int("block_num").len() as u64;

    MultiQueueOutcome {
        total,
        max_skew: watch.max_skew,
        proposer_span: None,
        finalized,
    }
}

/// Runs both modes on identical workloads and compares: wall-clock speedup,
/// the straggler's blast radius, and the skew that multi-queue permits.
pub fn multiqueue_comparison(params: &MultiQueueParams) -> ExperimentReport {
    let t_start = Instant::now();
    let multi_report = exp_multiqueue(&MultiQueueParams {
        mode: PipelineMode::Multi,
        ..params.clone()
    });
    let linear_report = exp_multiqueue(&MultiQueueParams {
        mode: PipelineMode::Linear,
        ..params.clone()
    });

    let mut report = ExperimentReport::new("multiqueue_comparison");
    report.parameters = multi_report.parameters.clone();
    report.parameters.remove("mode");
    let multi = &multi_report.runs[0];
    let linear = &linear_report.runs[0];
    let multi_s = multi.values["total_s"];
    let linear_s = linear.values["total_s"];
    let speedup = linear_s / multi_s;

    report.runs.push(multi.clone());
    report.runs.push(linear.clone());
    report.runs.push(
        RunRecord::new("comparison")
            .value("speedup", speedup)
            .value("gap_s", linear_s - multi_s),
    );

    for sub in [&multi_report, &linear_report] {
        for v in &sub.verdicts {
            report.verdicts.push(v.clone());
        }
    }
    report.check(
        "speedup",
        speedup >= MULTIQUEUE_SPEEDUP_MIN,
        format!("{speedup:.2}x >= {MULTIQUEUE_SPEEDUP_MIN}x ({linear_s:.1}s vs {multi_s:.1}s)"),
    );
    report.check(
        "stall propagates in the serialized control",
        linear_s - multi_s >= MULTIQUEUE_STALL_GAP_MIN.as_secs_f64(),
        format!(
            "gap {:.1}s >= {}s",
            linear_s - multi_s,
            MULTIQUEUE_STALL_GAP_MIN.as_secs()
        ),
    );

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

// ---------------------------------------------------------------------------
// Ordered commitment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OrderingParams {
    pub blocks: u64,
    /// Uniform per-task execution delay range.
    pub delay_range: (Duration, Duration),
    pub dispatchers: usize,
}

impl Default for OrderingParams {
    fn default() -> Self {
        OrderingParams {
            blocks: 100,
            delay_range: (Duration::from_millis(100), Duration::from_secs(2)),
            dispatchers: 8,
        }
    }
}

/// Random delays finish blocks out of order; the ordered-commit collector
/// must still emit them strictly in sequence.
pub fn exp_ordering(params: &OrderingParams, seed: u64) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("ordering")
        .param("blocks", params.blocks)
        .param(
            "delay_range_ms",
            format!(
                "{}..{}",
                params.delay_range.0.as_millis(),
                params.delay_range.1.as_millis()
            ),
        )
        .param("dispatchers", params.dispatchers)
        .param("seed", seed);

    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("ord_tasks")).expect("queue");
    bus.ensure_queue(QueueConfig::new("ord_done").ack_wait(COLLECT_ACK_WAIT))
        .expect("queue");
    bus.ensure_queue(QueueConfig::new("ord_committed").terminal())
        .expect("queue");
    let audit = Audit::attach(&bus, "ord_committed").expect("audit");

    let workers: Vec<DispatcherHandle> = (0..params.dispatchers)
        .map(|i| {
            spawn_dispatcher(
                &bus,
                DispatcherOptions::new(
                    format!("ord-{i}"),
                    "ord_tasks",
                    "ord_done",
                    delay_executor(),
                ),
            )
            .expect("spawn worker")
        })
        .collect();

    let strategies = StrategyRegistry::default();
    strategies.register("ordered_commit", || {
        Box::new(OrderedCommitStrategy::new("block_num", 0))
    });
    let mut opts = CollectorOptions::new("commit", "ord_done", "ord_committed")
        .inputs(1)
        .grouping("block_num")
        .strategy(StrategySpec::Custom("ordered_commit".to_string()))
        .timeout(NO_PARTIAL)
        .window(4096);
    opts.registry = Some(strategies);
    let committer = spawn_collector(&bus, opts).expect("spawn committer");

    let mut r = rng(seed);
    let (lo, hi) = (
        params.delay_range.0.as_millis() as i64,
        params.delay_range.1.as_millis() as i64,
    );
    let mut total_delay_ms = 0i64;
    let t0 = Instant::now();
    for b in 0..params.blocks {
        let delay = r.gen_range(lo..=hi);
        total_delay_ms += delay;
        publish(
            &bus,
            "ord_tasks",
            Payload::new()
                .with("block_num", b as i64)
                .with("latency_ms", delay)
                .with("task_id", format!("ord-b{b}")),
        );
    }

    let budget = Duration::from_secs_f64(
        (total_delay_ms as f64 / 1e3) / params.dispatchers.max(1) as f64 * 3.0 + 60.0,
    );
    wait_for(budget, Duration::from_millis(5), || {
        audit.len() as u64 >= params.blocks
    });
    let total = t0.elapsed();

    for w in workers {
        w.stop();
    }
    committer.stop();

    // The audit consumed the commit queue sequentially, so its record order
    // is the emission order.
    let sequence: Vec<i64> = audit
        .records()
        .iter()
        .filter_map(|p| p.get_int("block_num"))
        .collect();
    audit.stop();
    let violations = sequence.windows(2).filter(|w| w[1] < w[0]).count() as u64;
    let committed = sequence
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len() as u64;

    report.runs.push(
        RunRecord::new("ordering")
            .value("total_s", total.as_secs_f64())
            .value("committed", committed as f64)
            .value("violations", violations as f64),
    );
    report.summary.completed = Some(committed);
    report.summary.total = Some(params.blocks);
    report.check(
        "all blocks committed",
        committed == params.blocks,
        format!("{committed}/{}", params.blocks),
    );
    report.check(
        "commit order is non-decreasing",
        violations == 0,
        format!("{violations} out-of-order transitions"),
    );

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

// ---------------------------------------------------------------------------
// Collector buffering under skew
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SkewParams {
    /// Slow-track latency as a multiple of the fast track's.
    pub skew_ratios: Vec<u64>,
    pub blocks: u64,
    /// Collector in-flight window — the buffer bound under test.
    pub window: usize,
    pub fast_latency: Duration,
}

impl Default for SkewParams {
    fn default() -> Self {
        SkewParams {
            skew_ratios: vec![30, 50, 100],
            blocks: 200,
            window: 32,
            fast_latency: Duration::from_millis(1),
        }
    }
}

/// A fast track races ahead of a slow one into the same join collector. The
/// collector must buffer only up to its in-flight window — never
/// proportionally to the backlog.
pub fn exp_skew_memory(params: &SkewParams) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("skew_memory")
        .param("skew_ratios", format!("{:?}", params.skew_ratios))
        .param("blocks", params.blocks)
        .param("window", params.window)
        .param("fast_latency_ms", params.fast_latency.as_millis());

    for &ratio in &params.skew_ratios {
        let (stats, abandoned, total) = skew_run(params, ratio);
        report.runs.push(
            RunRecord::new(format!("skew={ratio}x"))
                .value("total_s", total.as_secs_f64())
                .value("barriers", stats.barriers as f64)
                .value("peak_buffered_members", stats.peak_buffered_members as f64)
                .value("peak_buffered_bytes", stats.peak_buffered_bytes as f64)
                .value("abandoned_members", abandoned as f64),
        );
        // The +4 covers the slow member being joined and claim/ack races at
        // the window edge.
        let bound = params.window as u64 + 4;
        report.check(
            &format!("buffer bounded at {ratio}x"),
            stats.peak_buffered_members <= bound && stats.peak_buffered_members < params.blocks,
            format!(
                "peak {} <= {bound} (blocks: {})",
                stats.peak_buffered_members, params.blocks
            ),
        );
        report.check(
            &format!("all barriers complete at {ratio}x"),
            stats.barriers == params.blocks && abandoned == 0,
            format!(
                "{}/{} barriers, {abandoned} members abandoned",
                stats.barriers, params.blocks
            ),
        );
    }

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

fn skew_run(params: &SkewParams, ratio: u64) -> (CollectorStats, u64, Duration) {
    let bus = Bus::in_memory();
    for q in ["skew_fast_tasks", "skew_slow_tasks"] {
        bus.ensure_queue(QueueConfig::new(q)).expect("queue");
    }
    for q in ["skew_fast_done", "skew_slow_done"] {
        bus.ensure_queue(QueueConfig::new(q).ack_wait(COLLECT_ACK_WAIT))
            .expect("queue");
    }
    bus.ensure_queue(QueueConfig::new("skew_paired").terminal())
        .expect("queue");
    let audit = Audit::attach(&bus, "skew_paired").expect("audit");

    let fast_ms = params.fast_latency.as_millis() as u64;
    let fast = spawn_dispatcher(
        &bus,
        DispatcherOptions::new(
            "fast",
            "skew_fast_tasks",
            "skew_fast_done",
            Arc::new(SimExecutor(SimBehavior::Sleep { millis: fast_ms })),
        ),
    )
    .expect("spawn fast");
    let slow = spawn_dispatcher(
        &bus,
        DispatcherOptions::new(
            "slow",
            "skew_slow_tasks",
            "skew_slow_done",
            Arc::new(SimExecutor(SimBehavior::Sleep {
                millis: fast_ms * ratio.max(1),
            })),
        ),
    )
    .expect("spawn slow");
    let joiner = spawn_collector(
        &bus,
        CollectorOptions::new("pair", "skew_fast_done", "skew_paired")
            .join_also("skew_slow_done")
            .inputs(2)
            .grouping("block_num")
            .timeout(NO_PARTIAL)
            .window(params.window),
    )
    .expect("spawn joiner");

    let t0 = Instant::now();
    for b in 0..params.blocks {
        publish(
            &bus,
            "skew_fast_tasks",
            Payload::new()
                .with("block_num", b as i64)
                .with("task_id", format!("fast-b{b}")),
        );
        publish(
            &bus,
            "skew_slow_tasks",
            Payload::new()
                .with("block_num", b as i64)
                .with("task_id", format!("slow-b{b}")),
        );
    }

    let budget = Duration::from_secs_f64(
        params.blocks as f64 * (fast_ms * ratio.max(1)) as f64 / 1e3 * 3.0 + 60.0,
    );
    wait_for(budget, Duration::from_millis(5), || {
        audit.len() as u64 >= params.blocks
    });
    let total = t0.elapsed();

    fast.stop();
    slow.stop();
    let (stats, drain) = joiner.shutdown();
    audit.stop();
    let abandoned = drain.map(|d| d.abandoned_members).unwrap_or(0);
    (stats, abandoned, total)
}

// ---------------------------------------------------------------------------
// Dedup bookkeeping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DedupParams {
    pub blocks: u64,
    /// Members per barrier.
    pub fragments: u64,
    pub collectors: u32,
    /// Redundant copies of legitimate members, republished with fresh
    /// message ids.
    pub duplicates: u64,
    /// Members with no grouping field at all.
    pub ungroupable: u64,
    /// Members published to a partition their group does not hash to.
    pub misroutes: u64,
}

impl Default for DedupParams {
    fn default() -> Self {
        DedupParams {
            blocks: 100,
            fragments: 4,
            collectors: 2,
            duplicates: 500,
            ungroupable: 120,
            misroutes: 80,
        }
    }
}

/// Floods a partitioned collector fleet with duplicates, ungroupable
/// members, and misroutes, shuffled into the legitimate workload. The
/// bookkeeping must come out exact: every duplicate dropped, every bad
/// member rejected, and not one barrier polluted.
pub fn exp_dedup(params: &DedupParams, seed: u64) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("dedup")
        .param("blocks", params.blocks)
        .param("fragments", params.fragments)
        .param("collectors", params.collectors)
        .param("duplicates", params.duplicates)
        .param("ungroupable", params.ungroupable)
        .param("misroutes", params.misroutes)
        .param("seed", seed);

    let c = params.collectors.max(2);
    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("dedup_proofs").ack_wait(COLLECT_ACK_WAIT))
        .expect("queue");
    for p in 0..c {
        bus.ensure_queue(
            QueueConfig::new(partition_subject("dedup_proofs", p)).ack_wait(COLLECT_ACK_WAIT),
        )
        .expect("queue");
    }
    bus.ensure_queue(QueueConfig::new("dedup_batches").terminal())
        .expect("queue");
    let audit = Audit::attach(&bus, "dedup_batches").expect("audit");

    let routing = Arc::new(RoutingState::new(c));
    let collectors: Vec<CollectorHandle> = (0..c)
        .map(|i| {
            spawn_collector(
                &bus,
                CollectorOptions::new("dedup", "dedup_proofs", "dedup_batches")
                    .inputs(params.fragments)
                    .grouping("block_num")
                    .timeout(NO_PARTIAL)
                    .window(4096)
                    .partitioned(PartitionPlan {
                        index: i,
                        routing: routing.clone(),
                    }),
            )
            .expect("spawn collector")
        })
        .collect();

    // Build the full injection plan, then shuffle: the bookkeeping must not
    // depend on arrival order.
    let part_of = |b: u64| (b % c as u64) as u32;
    let mut plan: Vec<(String, Payload)> = Vec::new();
    for b in 0..params.blocks {
        for t in 0..params.fragments {
            plan.push((
                partition_subject("dedup_proofs", part_of(b)),
                Payload::new()
                    .with("block_num", b as i64)
                    .with("task_index", t as i64)
                    .with("task_id", format!("dd-b{b}-t{t}")),
            ));
        }
    }
    let mut r = rng(seed);
    for _ in 0..params.duplicates {
        let b = r.gen_range(0..params.blocks);
        let t = r.gen_range(0..params.fragments);
        plan.push((
            partition_subject("dedup_proofs", part_of(b)),
            Payload::new()
                .with("block_num", b as i64)
                .with("task_index", t as i64)
                .with("task_id", format!("dd-b{b}-t{t}")),
        ));
    }
    for i in 0..params.ungroupable {
        plan.push((
            partition_subject("dedup_proofs", (i % c as u64) as u32),
            Payload::new()
                .with("task_id", format!("junk-{i}"))
                .with("task_index", 0i64),
        ));
    }
    for i in 0..params.misroutes {
        let b = r.gen_range(0..params.blocks);
        plan.push((
            partition_subject("dedup_proofs", (part_of(b) + 1) % c),
            Payload::new()
                .with("block_num", b as i64)
                .with("task_index", (params.fragments + i) as i64)
                .with("task_id", format!("mis-{i}")),
        ));
    }
    plan.shuffle(&mut r);
    let injected = plan.len() as u64;
    for (subject, payload) in plan {
        publish(&bus, &subject, payload);
    }

    // Everything acks eventually: members at emission, duplicates and
    // rejections on sight. Empty partitions mean the ledgers are final.
    wait_for(Duration::from_secs(25), Duration::from_millis(5), || {
        (0..c).all(|p| {
            bus.stream_state(&partition_subject("dedup_proofs", p))
                .map(|s| s.depth == 0)
                .unwrap_or(false)
        }) && audit.len() as u64 >= params.blocks
    });

    let mut stats = CollectorStats::default();
    for h in collectors {
        let (s, _) = h.shutdown();
        stats = sum_stats(stats, s);
    }

    let records = audit.records();
    audit.stop();
    let mut invalid = 0u64;
    let mut complete_blocks = std::collections::BTreeSet::new();
    for barrier in &records {
        let block = barrier.get_int("block_num").unwrap_or(-1);
        let expected_indices: std::collections::BTreeSet<i64> =
            (0..params.fragments as i64).collect();
        let member_indices: std::collections::BTreeSet<i64> = match barrier.get("members") {
            Some(Value::List(ms)) => ms
                .iter()
                .filter_map(|m| match m {
                    Value::Map(fields) => match (fields.get("task_index"), fields.get("block_num")) {
                        (Some(Value::Int(t)), Some(Value::Int(b))) if *b == block => Some(*t),
                        _ => None,
                    },
                    _ => None,
                })
                .collect(),
            _ => Default::default(),
        };
        let ok = barrier.get_bool("complete") == Some(true)
            && barrier.get_int("member_count") == Some(params.fragments as i64)
            && member_indices == expected_indices
            && complete_blocks.insert(block);
        if !ok {
            invalid += 1;
        }
    }

    report.runs.push(
        RunRecord::new("dedup")
            .value("injected", injected as f64)
            .value("barriers", records.len() as f64)
            .value("duplicate_drops", stats.duplicate_drops as f64)
            .value("rejected", stats.rejected as f64)
            .value("invalid_aggregations", invalid as f64),
    );
    report.summary.completed = Some(complete_blocks.len() as u64);
    report.summary.total = Some(params.blocks);

    report.check(
        "every duplicate dropped",
        stats.duplicate_drops == params.duplicates,
        format!("{} == {}", stats.duplicate_drops, params.duplicates),
    );
    report.check(
        "every bad member rejected",
        stats.rejected == params.ungroupable + params.misroutes,
        format!(
            "{} == {}",
            stats.rejected,
            params.ungroupable + params.misroutes
        ),
    );
    report.check(
        "no invalid aggregations",
        invalid == 0 && complete_blocks.len() as u64 == params.blocks,
        format!(
            "{invalid} invalid, {}/{} barriers clean",
            complete_blocks.len(),
            params.blocks
        ),
    );

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

// ---------------------------------------------------------------------------
// Backpressure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BackpressureParams {
    pub depth_cap: usize,
    /// Total published, sized to overload the cap several times over.
    pub tasks: u64,
    pub workers: usize,
    pub task_latency: Duration,
}

impl Default for BackpressureParams {
    fn default() -> Self {
        BackpressureParams {
            depth_cap: 1000,
            tasks: 10_000,
            workers: 4,
            task_latency: Duration::from_millis(2),
        }
    }
}

/// A producer floods a depth-capped queue far faster than the fleet drains
/// it. Publishes must block at the cap — never fail, never overflow — and
/// the backlog must drain to zero once the producer relents.
pub fn exp_backpressure(params: &BackpressureParams) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("backpressure")
        .param("depth_cap", params.depth_cap)
        .param("tasks", params.tasks)
        .param("workers", params.workers)
        .param("task_latency_ms", params.task_latency.as_millis());

    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("bp_tasks").depth_cap(params.depth_cap))
        .expect("queue");

    let probe = TaskProbe::new();
    let exec = probe.wrap(Arc::new(SimExecutor(SimBehavior::Sleep {
        millis: params.task_latency.as_millis() as u64,
    })));
    let workers: Vec<DispatcherHandle> = (0..params.workers)
        .map(|i| {
            let mut opts =
                DispatcherOptions::new(format!("bp-{i}"), "bp_tasks", "unused", exec.clone());
            opts.output_queue = None;
            spawn_dispatcher(&bus, opts).expect("spawn worker")
        })
        .collect();

    // Depth sampler: the cap must hold at every instant.
    let sampling = Arc::new(AtomicBool::new(true));
    let sampler = {
        let bus = bus.clone();
        let sampling = sampling.clone();
        std::thread::spawn(move || {
            let mut peak = 0usize;
            while sampling.load(Ordering::Relaxed) {
                if let Ok(s) = bus.stream_state("bp_tasks") {
                    peak = peak.max(s.depth);
                }
                std::thread::sleep(Duration::from_millis(1));
            }
            peak
        })
    };

    let t0 = Instant::now();
    let mut stalled = 0u64;
    let mut max_publish = Duration::ZERO;
    for i in 0..params.tasks {
        let p0 = Instant::now();
        publish(
            &bus,
            "bp_tasks",
            Payload::new()
                .with("block_num", i as i64)
                .with("task_id", format!("bp-{i}")),
        );
        let took = p0.elapsed();
        max_publish = max_publish.max(took);
        if took > Duration::from_millis(1) {
            stalled += 1;
        }
    }
    let publish_span = t0.elapsed();

    // Once the cap is reached every further publish waits for a worker slot,
    // so the producer cannot finish faster than the fleet can absorb the
    // overflow. Half that service time is a conservative floor; an
    // unthrottled producer would finish the whole injection in milliseconds.
    let overflow = params.tasks.saturating_sub(params.depth_cap as u64);
    let span_floor = params.task_latency.mul_f64(overflow as f64 / params.workers as f64 / 2.0);

    let drained = wait_for(Duration::from_secs(50), Duration::from_millis(5), || {
        probe.count() as u64 >= params.tasks
            && bus
                .stream_state("bp_tasks")
                .map(|s| s.depth == 0)
                .unwrap_or(false)
    });
    let total = t0.elapsed();
    sampling.store(false, Ordering::Relaxed);
    let peak = sampler.join().expect("sampler");
    for w in workers {
        w.stop();
    }

    report.runs.push(
        RunRecord::new("backpressure")
            .value("peak_depth", peak as f64)
            .value("stalled_publishes", stalled as f64)
            .value("max_publish_ms", max_publish.as_secs_f64() * 1e3)
            .value("publish_span_s", publish_span.as_secs_f64())
            .value("total_s", total.as_secs_f64())
            .value("executed", probe.count() as f64),
    );
    report.summary.completed = Some(probe.count() as u64);
    report.summary.total = Some(params.tasks);

    report.check(
        "depth never exceeds the cap",
        peak <= params.depth_cap,
        format!("peak {peak} <= {}", params.depth_cap),
    );
    report.check(
        "producer reaches and holds the cap",
        peak == params.depth_cap,
        format!("peak {peak} == {}", params.depth_cap),
    );
    report.check(
        "overload blocks the producer",
        publish_span >= span_floor,
        format!(
            "injection took {:.2}s, throttle floor {:.2}s",
            publish_span.as_secs_f64(),
            span_floor.as_secs_f64()
        ),
    );
    report.check(
        "backlog drains to zero",
        drained,
        format!("{} executed, final depth 0: {drained}", probe.count()),
    );

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_routing_completes_every_barrier() {
        let report = exp_fragmentation(&FragmentationParams {
            collectors: 3,
            fragments: 3,
            barriers: 20,
            routing: RoutingMode::Affine,
        }, 11);
        assert!(report.passed(), "{}", report.verdict_lines());
        assert_eq!(report.summary.completed, Some(20));
    }

    #[test]
    fn one_collector_cannot_fragment() {
        let report = exp_fragmentation(&FragmentationParams {
            collectors: 1,
            fragments: 4,
            barriers: 15,
            routing: RoutingMode::RoundRobin,
        }, 12);
        assert!(report.passed(), "{}", report.verdict_lines());
        assert_eq!(report.summary.completed, Some(15));
    }

    #[test]
    fn shared_group_starves_most_barriers() {
        let report = exp_fragmentation(&FragmentationParams {
            collectors: 4,
            fragments: 4,
            barriers: 30,
            routing: RoutingMode::RoundRobin,
        }, 13);
        assert!(report.passed(), "{}", report.verdict_lines());
        let done = report.summary.completed.unwrap();
        assert!(done <= 8, "fragmentation should starve barriers, got {done}/30");
    }

    #[test]
    fn multiqueue_without_poison_finishes_quickly_with_small_skew() {
        let report = exp_multiqueue(&MultiQueueParams {
            blocks: 6,
            proofs_per_block: 3,
            proposer_latency: Duration::from_millis(2),
            prover_latency: Duration::from_millis(30),
            prover_replicas: 3,
            poison: None,
            mode: PipelineMode::Multi,
        });
        assert!(report.passed(), "{}", report.verdict_lines());
    }

    #[test]
    fn linear_mode_gates_blocks_on_the_previous_barrier() {
        let report = exp_multiqueue(&MultiQueueParams {
            blocks: 4,
            proofs_per_block: 2,
            proposer_latency: Duration::from_millis(2),
            prover_latency: Duration::from_millis(20),
            prover_replicas: 1,
            poison: None,
            mode: PipelineMode::Linear,
        });
        assert!(report.passed(), "{}", report.verdict_lines());
        let skew = report.runs[0].values["max_finality_skew"];
        assert!(skew <= 2.0, "serialized mode cannot run ahead, skew {skew}");
    }

    #[test]
    fn ordering_holds_under_random_delays() {
        let report = exp_ordering(
            &OrderingParams {
                blocks: 24,
                delay_range: (Duration::from_millis(5), Duration::from_millis(60)),
                dispatchers: 6,
            },
            7,
        );
        assert!(report.passed(), "{}", report.verdict_lines());
    }

    #[test]
    fn skew_buffering_stays_inside_the_window() {
        let report = exp_skew_memory(&SkewParams {
            skew_ratios: vec![25],
            blocks: 60,
            window: 8,
            fast_latency: Duration::from_millis(1),
        });
        assert!(report.passed(), "{}", report.verdict_lines());
        let peak = report.runs[0].values["peak_buffered_members"];
        assert!(peak <= 12.0, "peak {peak} should hug the window, not the backlog");
    }

    #[test]
    fn dedup_ledgers_come_out_exact() {
        let report = exp_dedup(
            &DedupParams {
                blocks: 20,
                fragments: 3,
                collectors: 2,
                duplicates: 40,
                ungroupable: 11,
                misroutes: 9,
            },
            99,
        );
        assert!(report.passed(), "{}", report.verdict_lines());
    }

    #[test]
    fn backpressure_caps_depth_and_drains() {
        let report = exp_backpressure(&BackpressureParams {
            depth_cap: 50,
            tasks: 400,
            workers: 4,
            task_latency: Duration::from_millis(1),
        });
        assert!(report.passed(), "{}", report.verdict_lines());
    }
}
