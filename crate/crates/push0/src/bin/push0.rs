//! Command-line front end: launch declarative pipelines and reproduce the
//! reference benchmarks, experiments, and chaos scenarios. Every
//! report-producing subcommand prints its verdicts, optionally writes
//! `report.json` / `report.csv` under `--out`, and exits nonzero when any
//! check fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use push0::bus::{Bus, BusOptions};
use push0::harness::bench::{bench_latency, bench_scaling, LatencyParams, ScalingParams};
use push0::harness::chaos::{
    chaos_bus_pause, chaos_collector_kill, chaos_dispatcher_kill, chaos_mttr, BusPauseParams,
    CollectorKillParams, DispatcherKillParams, MttrParams,
};
use push0::harness::experiments::{
    exp_backpressure, exp_dedup, exp_fragmentation, exp_multiqueue, exp_ordering,
    exp_skew_memory, multiqueue_comparison, BackpressureParams, DedupParams, FragmentationParams,
    MultiQueueParams, OrderingParams, PipelineMode, PoisonSpec, RoutingMode, SkewParams,
};
use push0::harness::report::{write_reports, ExperimentReport};
use push0::harness::verify::{verify_with, VerifyOptions};
use push0::metrics::{serve_metrics, MetricsRegistry};
use push0::payload::Payload;
use push0::pipeline::{Pipeline, PipelineConfig, PipelineOptions, StageReport};
use push0::trace::SpanLog;

#[derive(Parser)]
#[command(
    name = "push0",
    version,
    about = "Ordered, fault-tolerant pipelines of expensive compute tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Launch a pipeline from a TOML stage config and run it.
    Run(RunArgs),
    /// Latency and scaling benchmarks.
    Bench {
        #[command(subcommand)]
        which: BenchCommand,
    },
    /// Reference experiments.
    Exp {
        #[command(subcommand)]
        which: ExpCommand,
    },
    /// Fault-injection scenarios with loss audits.
    Chaos(ChaosArgs),
    /// The full acceptance gate: eleven criteria, one verdict line each.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct OutArg {
    /// Write report.json and report.csv into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Stage config (TOML); `<STAGE>__<KEY>` environment overrides apply.
    config: PathBuf,
    /// Durable log directory; omitted keeps the bus in memory.
    #[arg(long)]
    durable: Option<PathBuf>,
    /// Synthetic tasks to inject once the pipeline is up.
    #[arg(long, default_value_t = 0)]
    inject: u64,
    /// Queue to inject into; defaults to the most upstream stage's input.
    #[arg(long)]
    inject_queue: Option<String>,
    /// Seconds before teardown; 0 runs until the process is killed.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Serve Prometheus text metrics on this port (0 picks a free one).
    #[arg(long)]
    metrics_port: Option<u16>,
    /// Append finished spans to this JSON-lines file.
    #[arg(long)]
    spans: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Publish-to-done round trips through an echo fleet at fixed rates.
    Latency(LatencyArgs),
    /// Fixed work per worker across growing fleets.
    Scaling(ScalingArgs),
}

#[derive(Args)]
struct LatencyArgs {
    /// Offered loads, tasks per second.
    #[arg(long, value_delimiter = ',', default_values_t = vec![100.0])]
    rates: Vec<f64>,
    /// Tasks per repetition.
    #[arg(long, default_value_t = 1000)]
    tasks: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Workers draining the queue.
    #[arg(long, default_value_t = 10)]
    dispatchers: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ScalingArgs {
    /// Fleet sizes to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
    dispatchers: Vec<usize>,
    /// Tasks per dispatcher, so per-worker work stays fixed.
    #[arg(long, default_value_t = 10)]
    tasks_per_dispatcher: usize,
    /// Simulated proving time per task, milliseconds (0 measures pure
    /// orchestration contention).
    #[arg(long, default_value_t = 1000)]
    prover_latency_ms: u64,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Subcommand)]
enum ExpCommand {
    /// Barrier completion under affine vs scattered fragment routing.
    Fragmentation(FragmentationArgs),
    /// Dual-track pipeline against the serialized control.
    Multiqueue(MultiqueueArgs),
    /// Ordered commitment under random completion order.
    Ordering(OrderingArgs),
    /// Collector buffering when one track races ahead of another.
    Skew(SkewArgs),
    /// Duplicate, ungroupable, and misrouted floods against the bookkeeping.
    Dedup(DedupArgs),
    /// Producer overload against a depth-capped queue.
    Backpressure(BackpressureArgs),
}

#[derive(Args)]
struct FragmentationArgs {
    #[arg(long, default_value_t = 4)]
    collectors: u32,
    /// Fragments per barrier.
    #[arg(long, default_value_t = 4)]
    fragments: u32,
    #[arg(long, default_value_t = 100)]
    barriers: u64,
    /// `affine` routes by group hash; `round-robin` is the scattering control.
    #[arg(long, default_value = "affine", value_parser = RoutingMode::parse)]
    routing: RoutingMode,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct MultiqueueArgs {
    /// `multi`, `linear`, or `compare` to run both and check the gap.
    #[arg(long, default_value = "compare")]
    mode: String,
    #[arg(long, default_value_t = 30)]
    blocks: u64,
    #[arg(long, default_value_t = 8)]
    proofs_per_block: u64,
    #[arg(long, default_value_t = 10)]
    proposer_latency_ms: u64,
    #[arg(long, default_value_t = 300)]
    prover_latency_ms: u64,
    #[arg(long, default_value_t = 4)]
    replicas: usize,
    /// Block whose first proof runs long; negative disables the straggler.
    #[arg(long, default_value_t = 5)]
    poison_block: i64,
    #[arg(long, default_value_t = 15_000)]
    poison_extra_ms: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct OrderingArgs {
    #[arg(long, default_value_t = 100)]
    blocks: u64,
    /// Uniform completion-delay range, milliseconds.
    #[arg(long, default_value_t = 100)]
    delay_min_ms: u64,
    #[arg(long, default_value_t = 2000)]
    delay_max_ms: u64,
    #[arg(long, default_value_t = 8)]
    dispatchers: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct SkewArgs {
    /// Slow-track latency multiples to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![30, 50, 100])]
    ratios: Vec<u64>,
    #[arg(long, default_value_t = 200)]
    blocks: u64,
    /// Collector in-flight window — the buffer bound under test.
    #[arg(long, default_value_t = 32)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    fast_latency_ms: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long, default_value_t = 100)]
    blocks: u64,
    #[arg(long, default_value_t = 4)]
    fragments: u64,
    #[arg(long, default_value_t = 2)]
    collectors: u32,
    #[arg(long, default_value_t = 500)]
    duplicates: u64,
    #[arg(long, default_value_t = 120)]
    ungroupable: u64,
    #[arg(long, default_value_t = 80)]
    misroutes: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct BackpressureArgs {
    /// Queue depth cap.
    #[arg(long, default_value_t = 1000)]
    depth_cap: usize,
    /// Tasks to push through (ten times the cap by default).
    #[arg(long, default_value_t = 10_000)]
    tasks: u64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 2)]
    task_latency_ms: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ChaosScenario {
    DispatcherKill,
    CollectorKill,
    BusPause,
    Mttr,
    All,
}

#[derive(Args)]
struct ChaosArgs {
    /// Scenario to run; `all` runs the four in sequence.
    #[arg(long, value_enum, default_value_t = ChaosScenario::All)]
    scenario: ChaosScenario,
    /// dispatcher-kill / bus-pause: tasks to push through.
    #[arg(long)]
    tasks: Option<u64>,
    /// dispatcher-kill / bus-pause: worker fleet size.
    #[arg(long)]
    workers: Option<u32>,
    /// dispatcher-kill / bus-pause: simulated proving time, milliseconds.
    #[arg(long)]
    task_latency_ms: Option<u64>,
    /// dispatcher-kill / collector-kill: lease timeout, seconds.
    #[arg(long)]
    ack_wait_secs: Option<u64>,
    /// collector-kill: barriers to complete.
    #[arg(long)]
    barriers: Option<u64>,
    /// collector-kill: fragments per barrier.
    #[arg(long)]
    fragments: Option<u64>,
    /// collector-kill: kill once this many barriers have been emitted.
    #[arg(long)]
    kill_at_barrier: Option<u64>,
    /// bus-pause: pause windows to sweep, seconds.
    #[arg(long, value_delimiter = ',')]
    pause_windows_secs: Option<Vec<u64>>,
    /// mttr: lease timeouts to sweep, seconds.
    #[arg(long, value_delimiter = ',')]
    ack_waits_secs: Option<Vec<u64>>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Criterion numbers (1-11) to run; omitted runs all eleven.
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<usize>>,
    #[command(flatten)]
    out: OutArg,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run_pipeline(args),
        Command::Bench { which } => match which {
            BenchCommand::Latency(a) => {
                let params = LatencyParams {
                    rates: a.rates,
                    n_tasks: a.tasks,
                    repetitions: a.repetitions,
                    dispatchers: a.dispatchers,
                };
                finish(vec![bench_latency(&params)], &a.out)
            }
            BenchCommand::Scaling(a) => {
                let params = ScalingParams {
                    dispatcher_counts: a.dispatchers,
                    tasks_per_dispatcher: a.tasks_per_dispatcher,
                    prover_latency: Duration::from_millis(a.prover_latency_ms),
                    repetitions: a.repetitions,
                };
                finish(vec![bench_scaling(&params)], &a.out)
            }
        },
        Command::Exp { which } => match which {
            ExpCommand::Fragmentation(a) => {
                let params = FragmentationParams {
                    collectors: a.collectors,
                    fragments: a.fragments,
                    barriers: a.barriers,
                    routing: a.routing,
                };
                finish(vec![exp_fragmentation(&params, a.seed)], &a.out)
            }
            ExpCommand::Multiqueue(a) => {
                let poison = (a.poison_block >= 0).then_some(PoisonSpec {
                    block: a.poison_block,
                    extra: Duration::from_millis(a.poison_extra_ms),
                });
                let params = MultiQueueParams {
                    blocks: a.blocks,
                    proofs_per_block: a.proofs_per_block,
                    proposer_latency: Duration::from_millis(a.proposer_latency_ms),
                    prover_latency: Duration::from_millis(a.prover_latency_ms),
                    prover_replicas: a.replicas,
                    poison,
                    mode: PipelineMode::Multi,
                };
                let reports = match a.mode.as_str() {
                    "compare" => vec![multiqueue_comparison(&params)],
                    m => match PipelineMode::parse(m) {
                        Ok(mode) => vec![exp_multiqueue(&MultiQueueParams { mode, ..params })],
                        Err(e) => return usage_error(&e),
                    },
                };
                finish(reports, &a.out)
            }
            ExpCommand::Ordering(a) => {
                let params = OrderingParams {
                    blocks: a.blocks,
                    delay_range: (
                        Duration::from_millis(a.delay_min_ms),
                        Duration::from_millis(a.delay_max_ms),
                    ),
                    dispatchers: a.dispatchers,
                };
                finish(vec![exp_ordering(&params, a.seed)], &a.out)
            }
            ExpCommand::Skew(a) => {
                let params = SkewParams {
                    skew_ratios: a.ratios,
                    blocks: a.blocks,
                    window: a.window,
                    fast_latency: Duration::from_millis(a.fast_latency_ms),
                };
                finish(vec![exp_skew_memory(&params)], &a.out)
            }
            ExpCommand::Dedup(a) => {
                let params = DedupParams {
                    blocks: a.blocks,
                    fragments: a.fragments,
                    collectors: a.collectors,
                    duplicates: a.duplicates,
                    ungroupable: a.ungroupable,
                    misroutes: a.misroutes,
                };
                finish(vec![exp_dedup(&params, a.seed)], &a.out)
            }
            ExpCommand::Backpressure(a) => {
                let params = BackpressureParams {
                    depth_cap: a.depth_cap,
                    tasks: a.tasks,
                    workers: a.workers,
                    task_latency: Duration::from_millis(a.task_latency_ms),
                };
                finish(vec![exp_backpressure(&params)], &a.out)
            }
        },
        Command::Chaos(a) => {
            let mut reports = Vec::new();
            if matches!(a.scenario, ChaosScenario::DispatcherKill | ChaosScenario::All) {
                let mut p = DispatcherKillParams::default();
                if let Some(t) = a.tasks {
                    p.tasks = t;
                }
                if let Some(w) = a.workers {
                    p.workers = w;
                }
                if let Some(ms) = a.task_latency_ms {
                    p.task_latency = Duration::from_millis(ms);
                }
                if let Some(s) = a.ack_wait_secs {
                    p.ack_wait = Duration::from_secs(s);
                }
                reports.push(chaos_dispatcher_kill(&p));
            }
            if matches!(a.scenario, ChaosScenario::CollectorKill | ChaosScenario::All) {
                let mut p = CollectorKillParams::default();
                if let Some(b) = a.barriers {
                    p.barriers = b;
                }
                if let Some(f) = a.fragments {
                    p.fragments = f as u32;
                }
                if let Some(k) = a.kill_at_barrier {
                    p.kill_at_barrier = k;
                }
                if let Some(s) = a.ack_wait_secs {
                    p.ack_wait = Duration::from_secs(s);
                }
                reports.push(chaos_collector_kill(&p));
            }
            if matches!(a.scenario, ChaosScenario::BusPause | ChaosScenario::All) {
                let mut p = BusPauseParams::default();
                if let Some(t) = a.tasks {
                    p.tasks = t;
                }
                if let Some(w) = a.workers {
                    p.workers = w;
                }
                if let Some(ms) = a.task_latency_ms {
                    p.task_latency = Duration::from_millis(ms);
                }
                if let Some(ws) = &a.pause_windows_secs {
                    p.windows = ws.iter().map(|s| Duration::from_secs(*s)).collect();
                }
                reports.push(chaos_bus_pause(&p));
            }
            if matches!(a.scenario, ChaosScenario::Mttr | ChaosScenario::All) {
                let mut p = MttrParams::default();
                if let Some(ws) = &a.ack_waits_secs {
                    p.ack_waits = ws.iter().map(|s| Duration::from_secs(*s)).collect();
                }
                reports.push(chaos_mttr(&p));
            }
            finish(reports, &a.out)
        }
        Command::Verify(a) => {
            let opts = VerifyOptions {
                seed: a.seed,
                out_dir: a.out.out.clone(),
                only: a.only.clone(),
            };
            let outcome = verify_with(&opts, |c| println!("{}", c.format_line()));
            let total = outcome.criteria.len();
            let passed = outcome.criteria.iter().filter(|c| c.passed).count();
            println!("{passed}/{total} criteria passed");
            if let Some(dir) = &a.out.out {
                println!("reports written to {}", dir.display());
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

/// Print every report's verdicts, write files under `--out`, and turn the
/// combined result into the process exit code.
fn finish(reports: Vec<ExperimentReport>, out: &OutArg) -> ExitCode {
    let mut all_pass = true;
    for r in &reports {
        println!("== {} ({:.1}s)", r.experiment, r.elapsed_s);
        print!("{}", r.verdict_lines());
        all_pass &= r.passed();
    }
    if let Some(dir) = &out.out {
        if let Err(e) = write_reports(dir, &reports) {
            eprintln!("error: writing reports to {}: {e}", dir.display());
            return ExitCode::FAILURE;
        }
        println!("reports written to {}", dir.display());
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn run_pipeline(args: RunArgs) -> ExitCode {
    let config = match PipelineConfig::from_file(&args.config) {
        Ok(c) => c,
        Err(e) => return usage_error(&format!("{}: {e}", args.config.display())),
    };
    let metrics = MetricsRegistry::new();
    let bus_opts = match &args.durable {
        Some(dir) => BusOptions::durable(dir),
        None => BusOptions::in_memory(),
    };
    let bus = match Bus::open(bus_opts.with_metrics(metrics.clone())) {
        Ok(b) => b,
        Err(e) => return usage_error(&format!("opening bus: {e}")),
    };
    let spans = match &args.spans {
        Some(path) => match SpanLog::with_file(path) {
            Ok(log) => log,
            Err(e) => return usage_error(&format!("span log {}: {e}", path.display())),
        },
        None => SpanLog::new(),
    };

    let inject_queue = args.inject_queue.clone().unwrap_or_else(|| {
        // Most upstream stage's input: where external work enters.
        config
            .dependency_order()
            .first()
            .map(|s| config.stages[s].input_queue.first().to_string())
            .unwrap_or_default()
    });
    let opts = PipelineOptions {
        metrics: Some(metrics.clone()),
        spans: Some(spans),
        ..Default::default()
    };
    let pipeline = match Pipeline::launch(&bus, config, opts) {
        Ok(p) => p,
        Err(e) => return usage_error(&format!("launch: {e}")),
    };

    let mut server = None;
    if let Some(port) = args.metrics_port {
        match serve_metrics(metrics, port) {
            Ok(s) => {
                println!("metrics at {}", s.url());
                server = Some(s);
            }
            Err(e) => eprintln!("warning: metrics server: {e}"),
        }
    }

    if args.inject > 0 {
        if inject_queue.is_empty() {
            return usage_error("--inject needs --inject-queue (no stages in config)");
        }
        let publisher = pipeline.publisher(&inject_queue);
        for i in 0..args.inject {
            let payload = Payload::new()
                .with("task_id", format!("task-{i}"))
                .with("block_num", i as i64);
            if let Err(e) = publisher.publish(payload, BTreeMap::new()) {
                eprintln!("error: injecting into {inject_queue}: {e}");
                break;
            }
        }
        println!("injected {} tasks into {inject_queue}", args.inject);
    }

    if args.duration > 0.0 {
        std::thread::sleep(Duration::from_secs_f64(args.duration));
    } else {
        println!("running until killed (duration 0)");
        loop {
            std::thread::sleep(Duration::from_secs(60));
        }
    }

    let report = pipeline.stop();
    for stage in &report.stages {
        match stage {
            StageReport::Dispatcher { stage, workers } => {
                let processed: u64 = workers.iter().map(|w| w.processed).sum();
                let skips: u64 = workers.iter().map(|w| w.idempotent_skips).sum();
                println!(
                    "stage {stage}: {} workers, {processed} processed, {skips} idempotent skips",
                    workers.len(),
                );
            }
            StageReport::Collector { stage, collectors } => {
                let barriers: u64 = collectors.iter().map(|(c, _)| c.barriers).sum();
                let rejected: u64 = collectors.iter().map(|(c, _)| c.rejected).sum();
                println!(
                    "stage {stage}: {} collectors, {barriers} barriers, {rejected} rejected",
                    collectors.len(),
                );
            }
        }
    }
    for q in bus.queue_names() {
        if let Ok(s) = bus.stream_state(&q) {
            if s.depth > 0 || s.dlq_depth > 0 {
                println!("queue {q}: depth {} dlq {}", s.depth, s.dlq_depth);
            }
        }
    }
    if let Some(s) = &mut server {
        s.shutdown();
    }
    ExitCode::SUCCESS
}
