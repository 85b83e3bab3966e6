//! Chaos suite: crash whole dispatcher fleets mid-task, kill a collector
//! holding buffered members, freeze delivery bus-side, and audit that every
//! input still aggregates exactly once; recovery time is measured against
//! the lease clock.
//!
//! Every scenario has the same anatomy: build a small pipeline on a fresh
//! in-memory bus, inject a fixed workload, break something while it runs,
//! then reconcile the ledgers — injected count, aggregated count, raw
//! completions, dead letters — and time the recovery.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::bus::{Bus, QueueConfig};
use crate::collector::{spawn_collector, CollectorHandle, CollectorOptions, CollectorStats};
use crate::dispatcher::{
    spawn_dispatcher, DispatcherHandle, DispatcherOptions, Fault, FaultSite, KillSwitch,
    ResultStore,
};
use crate::executor::{SimBehavior, SimExecutor, TaskExecutor};
use crate::harness::report::{ExperimentReport, RunRecord};
use crate::harness::{wait_for, Audit, TaskProbe};
use crate::payload::Payload;

/// All-crashed recovery must land within one extra second past the lease
/// window: sweeper cadence plus a fresh claim.
pub const MTTR_SLACK: Duration = Duration::from_secs(1);
/// Recovery ceiling when a healthy worker survives to absorb the backlog.
pub const MTTR_HEALTHY_MAX: Duration = Duration::from_millis(1500);

/// Generous lease for collector-input queues (members wait unacknowledged
/// for their barrier) and an effectively-disabled partial flush.
const COLLECT_ACK_WAIT: Duration = Duration::from_secs(300);
const NO_PARTIAL: Duration = Duration::from_secs(300);

fn publish(bus: &Bus, subject: &str, payload: Payload) {
    bus.publish(subject, payload, Default::default())
        .expect("publish");
}

fn dlq_empty(bus: &Bus, queues: &[&str]) -> bool {
    queues.iter().all(|q| {
        bus.stream_state(q)
            .map(|s| s.dlq_depth == 0)
            .unwrap_or(false)
    })
}

fn depth(bus: &Bus, queue: &str) -> usize {
    bus.stream_state(queue).map(|s| s.depth).unwrap_or(usize::MAX)
}

// ---------------------------------------------------------------------------
// Shared two-stage loss ledger
// ---------------------------------------------------------------------------

/// tasks -> worker fleet -> done -> singleton-group collector -> agg.
///
/// The aggregate audit is the end-to-end ledger: distinct block numbers
/// there count inputs that made it all the way through, and the collector's
/// dedup absorbs any duplicate completions a crash produced. The done audit
/// shows raw completions, duplicates included.
struct Chain {
    bus: Bus,
    prefix: &'static str,
    probe: TaskProbe,
    exec: Arc<dyn TaskExecutor>,
    collector: Option<CollectorHandle>,
    done_audit: Audit,
    agg_audit: Audit,
}

impl Chain {
    fn build(prefix: &'static str, ack_wait: Duration, task_latency: Duration) -> Chain {
        let bus = Bus::in_memory();
        bus.ensure_queue(QueueConfig::new(format!("{prefix}_tasks")).ack_wait(ack_wait))
            .expect("queue");
        bus.ensure_queue(QueueConfig::new(format!("{prefix}_done")).ack_wait(COLLECT_ACK_WAIT))
            .expect("queue");
        bus.ensure_queue(QueueConfig::new(format!("{prefix}_agg")).terminal())
            .expect("queue");
        let probe = TaskProbe::new();
        let exec = probe.wrap(Arc::new(SimExecutor(SimBehavior::Sleep {
            millis: task_latency.as_millis() as u64,
        })));
        let collector = spawn_collector(
            &bus,
            CollectorOptions::new(
                format!("{prefix}-agg"),
                format!("{prefix}_done"),
                format!("{prefix}_agg"),
            )
            .inputs(1)
            .grouping("block_num")
            .timeout(NO_PARTIAL)
            .window(4096),
        )
        .expect("spawn collector");
        let done_audit = Audit::attach(&bus, &format!("{prefix}_done")).expect("audit");
        let agg_audit = Audit::attach(&bus, &format!("{prefix}_agg")).expect("audit");
        Chain {
            bus,
            prefix,
            probe,
            exec,
            collector: Some(collector),
            done_audit,
            agg_audit,
        }
    }

    fn spawn_worker(&self, i: u32, fault: Option<Fault>, store: Option<ResultStore>) -> DispatcherHandle {
        let mut opts = DispatcherOptions::new(
            format!("{}-worker-{i}", self.prefix),
            format!("{}_tasks", self.prefix),
            format!("{}_done", self.prefix),
            self.exec.clone(),
        );
        // Replicas must share one worker group for exclusive delivery.
        opts.worker_group = Some(format!("{}_workers", self.prefix));
        opts.fault = fault;
        opts.result_store = store;
        spawn_dispatcher(&self.bus, opts).expect("spawn worker")
    }

    fn inject(&self, n: u64) {
        for i in 0..n {
            publish(
                &self.bus,
                &format!("{}_tasks", self.prefix),
                Payload::new()
                    .with("block_num", i as i64)
                    .with("task_id", format!("{}-{i}", self.prefix)),
            );
        }
    }

    /// Distinct inputs that reached the aggregate queue.
    fn aggregated(&self) -> u64 {
        self.agg_audit.distinct_int("block_num").len() as u64
    }

    /// Both working queues fully consumed: nothing resident, nothing leased.
    fn drained(&self) -> bool {
        depth(&self.bus, &format!("{}_tasks", self.prefix)) == 0
            && depth(&self.bus, &format!("{}_done", self.prefix)) == 0
    }

    fn dlq_clean(&self) -> bool {
        let tasks = format!("{}_tasks", self.prefix);
        let done = format!("{}_done", self.prefix);
        dlq_empty(&self.bus, &[&tasks, &done])
    }

    fn finish(mut self) -> CollectorStats {
        let stats = match self.collector.take() {
            Some(c) => {
                c.kill();
                c.join().0
            }
            None => CollectorStats::default(),
        };
        self.done_audit.stop();
        self.agg_audit.stop();
        stats
    }
}

// ---------------------------------------------------------------------------
// Dispatcher fleet kill
// ---------------------------------------------------------------------------

pub struct DispatcherKillParams {
    pub tasks: u64,
    pub workers: u32,
    pub task_latency: Duration,
    pub ack_wait: Duration,
    /// Aggregate counts at which the entire fleet is crashed and replaced.
    pub kill_points: Vec<u64>,
}

impl Default for DispatcherKillParams {
    fn default() -> Self {
        DispatcherKillParams {
            tasks: 50,
            workers: 2,
            task_latency: Duration::from_secs(1),
            ack_wait: Duration::from_secs(2),
            kill_points: vec![10, 20, 30, 40],
        }
    }
}

/// Crash every dispatcher at each kill point — workers die right after
/// publishing, before the ack, so their leases lapse and the repeats arrive
/// downstream as duplicates — then replace the fleet and reconcile: every
/// input aggregated exactly once, nothing dead-lettered.
pub fn chaos_dispatcher_kill(params: &DispatcherKillParams) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("chaos_dispatcher_kill")
        .param("tasks", params.tasks)
        .param("workers", params.workers)
        .param("task_latency_ms", params.task_latency.as_millis())
        .param("ack_wait_s", params.ack_wait.as_secs_f64())
        .param("kill_points", format!("{:?}", params.kill_points));

    let chain = Chain::build("ck", params.ack_wait, params.task_latency);
    let store = ResultStore::in_memory();
    let spawn_fleet = |switch: &KillSwitch| -> Vec<DispatcherHandle> {
        (0..params.workers)
            .map(|i| {
                chain.spawn_worker(
                    i,
                    Some(Fault::new(FaultSite::AfterPublish, switch.clone())),
                    Some(store.clone()),
                )
            })
            .collect()
    };

    chain.inject(params.tasks);
    let t0 = Instant::now();
    let work = params.task_latency.as_secs_f64() * params.tasks as f64
        / params.workers.max(1) as f64;
    let budget = Duration::from_secs_f64(
        work * 3.0
            + params.kill_points.len() as f64
                * (params.ack_wait + params.task_latency).as_secs_f64()
            + 30.0,
    );

    let mut switch = KillSwitch::new();
    let mut fleet = spawn_fleet(&switch);
    let mut kills = 0u64;
    let mut fault_deaths = 0u64;
    for &point in &params.kill_points {
        if !wait_for(budget, Duration::from_millis(5), || {
            chain.aggregated() >= point
        }) {
            break;
        }
        switch.trigger();
        kills += 1;
        // Each worker dies at its next publish (or at once if idle); wait
        // out the whole generation before counting its deaths.
        wait_for(
            params.task_latency * 3 + Duration::from_secs(5),
            Duration::from_millis(5),
            || fleet.iter().all(|h| h.is_finished()),
        );
        for h in fleet.drain(..) {
            fault_deaths += u64::from(h.join().died_by_fault);
        }
        switch = KillSwitch::new();
        fleet = spawn_fleet(&switch);
    }

    // Aggregation alone is not the end: the last generation's orphans still
    // redeliver and must be absorbed as duplicates before the ledgers are
    // final.
    let done = wait_for(budget, Duration::from_millis(10), || {
        chain.aggregated() >= params.tasks && chain.drained()
    });
    let elapsed = t0.elapsed();

    for h in fleet.drain(..) {
        h.stop();
        h.join();
    }
    let executions = chain.probe.count() as u64;
    let raw_completions = chain.done_audit.len() as u64;
    let aggregated = chain.aggregated();
    let emissions = chain.agg_audit.len() as u64;
    let clean = chain.dlq_clean();
    let cstats = chain.finish();

    report.runs.push(
        RunRecord::new("dispatcher_kill")
            .value("injected", params.tasks as f64)
            .value("aggregated", aggregated as f64)
            .value("raw_completions", raw_completions as f64)
            .value("executions", executions as f64)
            .value("fleet_kills", kills as f64)
            .value("fault_deaths", fault_deaths as f64)
            .value("duplicates_absorbed", (cstats.duplicate_drops + cstats.skipped) as f64)
            .value("elapsed_s", elapsed.as_secs_f64()),
    );
    report.summary.completed = Some(aggregated);
    report.summary.total = Some(params.tasks);

    report.check(
        "every input aggregates exactly once",
        done && aggregated == params.tasks && emissions == params.tasks,
        format!(
            "{aggregated}/{} distinct, {emissions} barrier emissions",
            params.tasks
        ),
    );
    report.check(
        "no dead letters",
        clean,
        "task and completion queues have empty dead-letter queues".to_string(),
    );
    report.check(
        "completions at least match inputs",
        executions >= params.tasks && raw_completions >= params.tasks,
        format!(
            "{executions} executions, {raw_completions} raw completions for {} inputs",
            params.tasks
        ),
    );
    report.check(
        "every armed worker died at its fault site",
        fault_deaths == kills * params.workers as u64,
        format!("{fault_deaths} deaths across {kills} fleet kills"),
    );

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

// ---------------------------------------------------------------------------
// Collector kill
// ---------------------------------------------------------------------------

pub struct CollectorKillParams {
    pub barriers: u64,
    pub fragments: u32,
    pub ack_wait: Duration,
    /// Kill once this many barriers have been emitted (and members of later
    /// groups sit in the collector's buffer).
    pub kill_at_barrier: u64,
    /// Delay between consecutive member publishes.
    pub injection_pace: Duration,
}

impl Default for CollectorKillParams {
    fn default() -> Self {
        CollectorKillParams {
            barriers: 20,
            fragments: 4,
            ack_wait: Duration::from_secs(2),
            kill_at_barrier: 5,
            injection_pace: Duration::from_millis(50),
        }
    }
}

struct CollectorKillRun {
    total: Duration,
    completed: u64,
    emissions: u64,
    redelivered: u64,
    dlq_clean: bool,
    stats: CollectorStats,
}

fn collector_kill_run(params: &CollectorKillParams, kill: bool) -> CollectorKillRun {
    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("km_members").ack_wait(params.ack_wait))
        .expect("queue");
    bus.ensure_queue(QueueConfig::new("km_barriers").terminal())
        .expect("queue");
    let audit = Audit::attach(&bus, "km_barriers").expect("audit");

    let spawn = |bus: &Bus| {
        spawn_collector(
            bus,
            CollectorOptions::new("km", "km_members", "km_barriers")
                .inputs(params.fragments as u64)
                .grouping("block_num")
                .timeout(NO_PARTIAL)
                .window(4096),
        )
        .expect("spawn collector")
    };
    let mut collector = spawn(&bus);

    let t0 = Instant::now();
    // Fragment-major injection: every barrier's first member, then every
    // second member, and so on. Groups stay open until the final pass, so
    // mid-run the collector is holding a buffer's worth of leases — exactly
    // what the kill is meant to abandon.
    let injector = {
        let bus = bus.clone();
        let barriers = params.barriers;
        let k = params.fragments;
        let pace = params.injection_pace;
        std::thread::spawn(move || {
            for t in 0..k {
                for b in 0..barriers {
                    publish(
                        &bus,
                        "km_members",
                        Payload::new()
                            .with("block_num", b as i64)
                            .with("task_index", t as i64)
                            .with("task_id", format!("km-b{b}-t{t}")),
                    );
                    std::thread::sleep(pace);
                }
            }
        })
    };

    if kill {
        // Wait until the kill point has passed AND the victim holds live
        // member leases, so the replacement demonstrably recovers buffered
        // work rather than an empty collector.
        wait_for(Duration::from_secs(60), Duration::from_millis(2), || {
            audit.len() as u64 >= params.kill_at_barrier
                && bus
                    .stream_state("km_members")
                    .map(|s| s.inflight >= 2)
                    .unwrap_or(false)
        });
        collector.kill();
        let _ = collector.join();
        collector = spawn(&bus);
    }

    injector.join().expect("injector");
    let budget = params.injection_pace * (params.barriers as u32 * params.fragments)
        + params.ack_wait * 2
        + Duration::from_secs(15);
    wait_for(budget, Duration::from_millis(5), || {
        audit.len() as u64 >= params.barriers
    });
    let total = t0.elapsed();

    let redelivered = bus
        .stream_state("km_members")
        .map(|s| s.redelivered_total)
        .unwrap_or(0);
    let dlq_clean = dlq_empty(&bus, &["km_members"]);
    let stats = {
        collector.kill();
        collector.join().0
    };
    let completed = audit
        .records()
        .iter()
        .filter(|p| p.get_bool("complete") == Some(true))
        .filter_map(|p| p.get_int("block_num"))
        .collect::<std::collections::BTreeSet<i64>>()
        .len() as u64;
    let emissions = audit.len() as u64;
    audit.stop();

    CollectorKillRun {
        total,
        completed,
        emissions,
        redelivered,
        dlq_clean,
        stats,
    }
}

/// Kill the collector once a few barriers are out and its buffer holds
/// members of open groups; a replacement on the same worker group must
/// inherit the abandoned leases after one ack window and finish every
/// barrier, with total overhead inside two lease windows.
pub fn chaos_collector_kill(params: &CollectorKillParams) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("chaos_collector_kill")
        .param("barriers", params.barriers)
        .param("fragments", params.fragments)
        .param("ack_wait_s", params.ack_wait.as_secs_f64())
        .param("kill_at_barrier", params.kill_at_barrier)
        .param("injection_pace_ms", params.injection_pace.as_millis());

    let control = collector_kill_run(params, false);
    let chaos = collector_kill_run(params, true);
    let overhead = chaos.total.saturating_sub(control.total);

    for (label, run) in [("control", &control), ("collector_kill", &chaos)] {
        report.runs.push(
            RunRecord::new(label)
                .value("total_s", run.total.as_secs_f64())
                .value("completed", run.completed as f64)
                .value("emissions", run.emissions as f64)
                .value("redelivered", run.redelivered as f64)
                .value("members_accepted", run.stats.members as f64),
        );
    }
    report.summary.completed = Some(chaos.completed);
    report.summary.total = Some(params.barriers);

    report.check(
        "every barrier completes after the kill",
        chaos.completed == params.barriers && chaos.emissions == params.barriers,
        format!(
            "{}/{} complete, {} emissions",
            chaos.completed, params.barriers, chaos.emissions
        ),
    );
    report.check(
        "abandoned members redeliver to the replacement",
        chaos.redelivered >= 1,
        format!("{} redeliveries", chaos.redelivered),
    );
    report.check(
        "no dead letters",
        control.dlq_clean && chaos.dlq_clean,
        "member queue has an empty dead-letter queue".to_string(),
    );
    report.check(
        "recovery overhead stays inside two lease windows",
        overhead < params.ack_wait * 2,
        format!(
            "overhead {:.2}s < {:.2}s",
            overhead.as_secs_f64(),
            (params.ack_wait * 2).as_secs_f64()
        ),
    );

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

// ---------------------------------------------------------------------------
// Bus pause
// ---------------------------------------------------------------------------

pub struct BusPauseParams {
    pub tasks: u64,
    pub workers: u32,
    pub task_latency: Duration,
    /// Pause windows to sweep; delivery must freeze for each full window and
    /// resume unassisted.
    pub windows: Vec<Duration>,
    /// Executions to let through before freezing the task queue.
    pub pause_after: u64,
}

impl Default for BusPauseParams {
    fn default() -> Self {
        BusPauseParams {
            tasks: 30,
            workers: 2,
            task_latency: Duration::from_millis(50),
            windows: vec![
                Duration::from_secs(5),
                Duration::from_secs(10),
                Duration::from_secs(20),
            ],
            pause_after: 10,
        }
    }
}

struct PauseRun {
    frozen: bool,
    delivered_during_pause: u64,
    resume_gap: Duration,
    total: Duration,
    aggregated: u64,
    drained: bool,
    dlq_clean: bool,
}

fn pause_run(params: &BusPauseParams, window: Duration) -> PauseRun {
    let chain = Chain::build("cp", Duration::from_secs(2), params.task_latency);
    let fleet: Vec<DispatcherHandle> = (0..params.workers)
        .map(|i| chain.spawn_worker(i, None, None))
        .collect();

    chain.inject(params.tasks);
    let t0 = Instant::now();
    wait_for(Duration::from_secs(30), Duration::from_millis(2), || {
        chain.probe.count() as u64 >= params.pause_after
    });

    let t_pause = Instant::now();
    chain
        .bus
        .pause(&format!("{}_tasks", chain.prefix), window)
        .expect("pause");
    // Two delivery samples inside the window bracket the freeze; margins
    // keep them clear of the pause landing and of its expiry.
    let margin = window.div_f64(4.0).min(Duration::from_millis(300));
    std::thread::sleep(margin);
    let s1 = chain
        .bus
        .stream_state(&format!("{}_tasks", chain.prefix))
        .map(|s| s.delivered_total)
        .unwrap_or(0);
    std::thread::sleep(window.saturating_sub(margin * 2));
    let s2 = chain
        .bus
        .stream_state(&format!("{}_tasks", chain.prefix))
        .map(|s| s.delivered_total)
        .unwrap_or(u64::MAX);

    let budget = window + Duration::from_secs(30);
    wait_for(budget, Duration::from_millis(5), || {
        chain.aggregated() >= params.tasks && chain.drained()
    });
    let total = t0.elapsed();
    let resume_gap = chain
        .probe
        .first_start_after(t_pause + margin)
        .map(|t| t.duration_since(t_pause))
        .unwrap_or(Duration::MAX);

    for h in fleet {
        h.stop();
        h.join();
    }
    let aggregated = chain.aggregated();
    let drained = chain.drained();
    let dlq_clean = chain.dlq_clean();
    chain.finish();

    PauseRun {
        frozen: s1 == s2,
        delivered_during_pause: s2.saturating_sub(s1),
        resume_gap,
        total,
        aggregated,
        drained,
        dlq_clean,
    }
}

/// Freeze the task queue for each window while the fleet is mid-backlog.
/// Delivery must halt for the whole window (acks of in-flight work still
/// land), resume unassisted when it expires, and drain everything with no
/// losses and no dead letters.
pub fn chaos_bus_pause(params: &BusPauseParams) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("chaos_bus_pause")
        .param("tasks", params.tasks)
        .param("workers", params.workers)
        .param("task_latency_ms", params.task_latency.as_millis())
        .param(
            "windows_s",
            params
                .windows
                .iter()
                .map(|w| format!("{}", w.as_secs_f64()))
                .collect::<Vec<_>>()
                .join("/"),
        );

    let mut all_aggregated = 0u64;
    for &window in &params.windows {
        let run = pause_run(params, window);
        let w = window.as_secs_f64();
        report.runs.push(
            RunRecord::new(format!("pause_{w}s"))
                .value("window_s", w)
                .value("delivered_during_pause", run.delivered_during_pause as f64)
                .value("resume_gap_s", run.resume_gap.as_secs_f64())
                .value("total_s", run.total.as_secs_f64())
                .value("aggregated", run.aggregated as f64),
        );
        all_aggregated += run.aggregated;

        report.check(
            &format!("w={w}s delivery freezes for the window"),
            run.frozen && run.resume_gap >= window.saturating_sub(Duration::from_millis(300)),
            format!(
                "{} deliveries during the pause, first new start {:.2}s after it",
                run.delivered_during_pause,
                run.resume_gap.as_secs_f64()
            ),
        );
        report.check(
            &format!("w={w}s backlog drains after resume"),
            run.aggregated == params.tasks && run.drained && run.dlq_clean,
            format!(
                "{}/{} aggregated, drained: {}, dead letters clean: {}",
                run.aggregated, params.tasks, run.drained, run.dlq_clean
            ),
        );
    }
    report.summary.completed = Some(all_aggregated);
    report.summary.total = Some(params.tasks * params.windows.len() as u64);

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

// ---------------------------------------------------------------------------
// MTTR vs lease timeout
// ---------------------------------------------------------------------------

pub struct MttrParams {
    /// Lease timeouts to sweep.
    pub ack_waits: Vec<Duration>,
    /// Task length for the all-crashed leg; long enough that the whole fleet
    /// is mid-execution when the switch flips.
    pub crash_task_latency: Duration,
    pub healthy_tasks: u64,
    pub healthy_task_latency: Duration,
}

impl Default for MttrParams {
    fn default() -> Self {
        MttrParams {
            ack_waits: vec![
                Duration::from_secs(5),
                Duration::from_secs(10),
                Duration::from_secs(20),
            ],
            crash_task_latency: Duration::from_secs(3),
            healthy_tasks: 6,
            healthy_task_latency: Duration::from_millis(400),
        }
    }
}

struct AllCrashed {
    mttr: Duration,
    redelivered: u64,
    aggregated: u64,
    dlq_clean: bool,
}

/// Both workers crash mid-execution with no backlog (exactly one task each),
/// so the first new start after the crash can only be a redelivery: recovery
/// waits out the full lease and nothing shorter.
fn mttr_all_crashed(ack_wait: Duration, latency: Duration) -> AllCrashed {
    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("mt_tasks").ack_wait(ack_wait))
        .expect("queue");
    bus.ensure_queue(QueueConfig::new("mt_done").terminal())
        .expect("queue");
    let audit = Audit::attach(&bus, "mt_done").expect("audit");
    let probe = TaskProbe::new();
    let exec = probe.wrap(Arc::new(SimExecutor(SimBehavior::Sleep {
        millis: latency.as_millis() as u64,
    })));
    let spawn = |i: u32, fault: Option<Fault>| {
        let mut opts = DispatcherOptions::new(
            format!("mt-worker-{i}"),
            "mt_tasks",
            "mt_done",
            exec.clone(),
        );
        opts.fault = fault;
        spawn_dispatcher(&bus, opts).expect("spawn worker")
    };

    for i in 0..2i64 {
        publish(
            &bus,
            "mt_tasks",
            Payload::new()
                .with("block_num", i)
                .with("task_id", format!("mt-{i}")),
        );
    }
    let switch = KillSwitch::new();
    let doomed: Vec<DispatcherHandle> = (0..2)
        .map(|i| spawn(i, Some(Fault::new(FaultSite::BeforePublish, switch.clone()))))
        .collect();
    // Both leases held means both workers are mid-execution; flip the switch
    // well inside the task so the deaths strand work, not idle threads.
    wait_for(Duration::from_secs(10), Duration::from_millis(2), || {
        bus.stream_state("mt_tasks")
            .map(|s| s.inflight >= 2)
            .unwrap_or(false)
    });
    std::thread::sleep(latency.mul_f64(0.4));

    let t_kill = Instant::now();
    switch.trigger();
    let healthy: Vec<DispatcherHandle> = (2..4).map(|i| spawn(i, None)).collect();

    let budget = ack_wait + latency + Duration::from_secs(10);
    wait_for(budget, Duration::from_millis(2), || probe.count() >= 4);
    let mttr = probe
        .first_start_after(t_kill)
        .map(|t| t.duration_since(t_kill))
        .unwrap_or(Duration::MAX);
    wait_for(latency + Duration::from_secs(10), Duration::from_millis(5), || {
        audit.distinct_int("block_num").len() >= 2
    });

    let redelivered = bus
        .stream_state("mt_tasks")
        .map(|s| s.redelivered_total)
        .unwrap_or(0);
    let aggregated = audit.distinct_int("block_num").len() as u64;
    let dlq_clean = dlq_empty(&bus, &["mt_tasks"]);
    for h in doomed.into_iter().chain(healthy) {
        h.stop();
        h.join();
    }
    audit.stop();

    AllCrashed {
        mttr,
        redelivered,
        aggregated,
        dlq_clean,
    }
}

/// One of two workers crashes mid-task; the survivor keeps claiming backlog,
/// so the next task start lands within one task length of the crash no
/// matter how long the lease is.
fn mttr_one_healthy(ack_wait: Duration, tasks: u64, latency: Duration) -> Duration {
    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("mh_tasks").ack_wait(ack_wait))
        .expect("queue");
    bus.ensure_queue(QueueConfig::new("mh_done").terminal())
        .expect("queue");
    let probe = TaskProbe::new();
    let exec = probe.wrap(Arc::new(SimExecutor(SimBehavior::Sleep {
        millis: latency.as_millis() as u64,
    })));
    let spawn = |i: u32, fault: Option<Fault>| {
        let mut opts = DispatcherOptions::new(
            format!("mh-worker-{i}"),
            "mh_tasks",
            "mh_done",
            exec.clone(),
        );
        opts.fault = fault;
        spawn_dispatcher(&bus, opts).expect("spawn worker")
    };

    for i in 0..tasks {
        publish(
            &bus,
            "mh_tasks",
            Payload::new()
                .with("block_num", i as i64)
                .with("task_id", format!("mh-{i}")),
        );
    }
    let switch = KillSwitch::new();
    let doomed = spawn(0, Some(Fault::new(FaultSite::BeforePublish, switch.clone())));
    let survivor = spawn(1, None);

    // Flip the switch early, while both workers are mid-task and most of the
    // backlog is still queued: the survivor's next claim is the recovery.
    wait_for(Duration::from_secs(15), Duration::from_millis(2), || {
        bus.stream_state("mh_tasks")
            .map(|s| s.inflight >= 2)
            .unwrap_or(false)
    });
    std::thread::sleep(latency.mul_f64(0.4));
    let t_kill = Instant::now();
    switch.trigger();

    wait_for(
        latency * 2 + Duration::from_secs(5),
        Duration::from_millis(1),
        || probe.first_start_after(t_kill).is_some(),
    );
    let mttr = probe
        .first_start_after(t_kill)
        .map(|t| t.duration_since(t_kill))
        .unwrap_or(Duration::MAX);

    // The orphaned lease only lapses a full ack window later; this leg is
    // done measuring, so tear down without waiting for it.
    survivor.stop();
    survivor.join();
    doomed.stop();
    doomed.join();
    mttr
}

/// Sweep the lease timeout and measure recovery two ways per value: the
/// whole fleet crashing (recovery = lease lapse, within one second past it)
/// and a lone crash beside a healthy worker (recovery = the survivor's next
/// claim, well under the lease).
pub fn chaos_mttr(params: &MttrParams) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("chaos_mttr")
        .param(
            "ack_waits_s",
            params
                .ack_waits
                .iter()
                .map(|w| format!("{}", w.as_secs_f64()))
                .collect::<Vec<_>>()
                .join("/"),
        )
        .param("crash_task_latency_ms", params.crash_task_latency.as_millis())
        .param("healthy_tasks", params.healthy_tasks)
        .param("healthy_task_latency_ms", params.healthy_task_latency.as_millis());

    for &ack in &params.ack_waits {
        let t = ack.as_secs_f64();
        let all = mttr_all_crashed(ack, params.crash_task_latency);
        let healthy = mttr_one_healthy(ack, params.healthy_tasks, params.healthy_task_latency);

        report.runs.push(
            RunRecord::new(format!("T={t}s all-crashed"))
                .value("ack_wait_s", t)
                .value("mttr_s", all.mttr.as_secs_f64())
                .value("redelivered", all.redelivered as f64)
                .value("aggregated", all.aggregated as f64),
        );
        report.runs.push(
            RunRecord::new(format!("T={t}s one-healthy"))
                .value("ack_wait_s", t)
                .value("mttr_s", healthy.as_secs_f64()),
        );

        report.check(
            &format!("T={t}s all-crashed recovery tracks the lease"),
            all.mttr >= ack && all.mttr <= ack + MTTR_SLACK,
            format!(
                "MTTR {:.2}s within [{t:.0}s, {:.0}s]",
                all.mttr.as_secs_f64(),
                (ack + MTTR_SLACK).as_secs_f64()
            ),
        );
        report.check(
            &format!("T={t}s all-crashed loses nothing"),
            all.redelivered == 2 && all.aggregated == 2 && all.dlq_clean,
            format!(
                "{} redeliveries, {}/2 aggregated, dead letters clean: {}",
                all.redelivered, all.aggregated, all.dlq_clean
            ),
        );
        report.check(
            &format!("T={t}s one-healthy recovers under {:.1}s", MTTR_HEALTHY_MAX.as_secs_f64()),
            healthy < MTTR_HEALTHY_MAX,
            format!("MTTR {:.2}s", healthy.as_secs_f64()),
        );
    }

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}
