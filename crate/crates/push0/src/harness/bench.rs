//! Latency and scaling benchmarks.
//!
//! Both run against a fresh in-memory bus with simulated provers so the
//! numbers isolate orchestration cost: claim, idempotency lookup, publish,
//! record, ack — never proving time.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::bus::{Bus, QueueConfig};
use crate::dispatcher::{spawn_dispatcher, DispatcherOptions};
use crate::executor::{SimBehavior, SimExecutor};
use crate::harness::report::{mean_std, median, percentile, ExperimentReport, RunRecord};
use crate::harness::{wait_for, TaskProbe};

/// Per-task orchestration overhead budget at the reference offered load.
pub const LATENCY_P50_MAX: Duration = Duration::from_millis(25);
pub const LATENCY_P99_MAX: Duration = Duration::from_millis(50);
/// A run must achieve at least this fraction of its target publish rate for
/// its latency numbers to mean anything.
pub const RATE_FLOOR: f64 = 0.90;

/// Scaling-efficiency floors by simulated proving time.
pub const SCALING_EFFICIENCY_1S_MIN: f64 = 0.95;
pub const SCALING_EFFICIENCY_5S_MIN: f64 = 0.98;

#[derive(Debug, Clone)]
pub struct LatencyParams {
    /// Offered loads, tasks per second.
    pub rates: Vec<f64>,
    /// Tasks published per repetition.
    pub n_tasks: usize,
    pub repetitions: usize,
    /// Terminal workers draining the queue.
    pub dispatchers: usize,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams {
            rates: vec![100.0],
            n_tasks: 1000,
            repetitions: 3,
            dispatchers: 10,
        }
    }
}

/// Publish `n_tasks` zero-work tasks at each target rate and measure
/// publish-to-execution-finish latency per task. Verdicts compare the
/// median-across-repetitions P50/P99 against the pinned budgets.
pub fn bench_latency(params: &LatencyParams) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("latency")
        .param("rates", format!("{:?}", params.rates))
        .param("n_tasks", params.n_tasks)
        .param("repetitions", params.repetitions)
        .param("dispatchers", params.dispatchers);

    for &rate in &params.rates {
        let mut p50s = Vec::new();
        let mut p99s = Vec::new();
        let mut achieved = Vec::new();
        for rep in 0..params.repetitions {
            let run = latency_run(rate, params.n_tasks, params.dispatchers, rep);
            p50s.push(run.values["p50_ms"]);
            p99s.push(run.values["p99_ms"]);
            achieved.push(run.values["achieved_rate"]);
            report.runs.push(run);
        }
        let p50 = median(&p50s);
        let p99 = median(&p99s);
        let rate_floor = rate * RATE_FLOOR;
        let got_rate = median(&achieved);
        report.check(
            &format!("p50 at {rate}/s"),
            p50 <= LATENCY_P50_MAX.as_secs_f64() * 1e3,
            format!("{p50:.2}ms <= {}ms", LATENCY_P50_MAX.as_millis()),
        );
        report.check(
            &format!("p99 at {rate}/s"),
            p99 <= LATENCY_P99_MAX.as_secs_f64() * 1e3,
            format!("{p99:.2}ms <= {}ms", LATENCY_P99_MAX.as_millis()),
        );
        report.check(
            &format!("offered load at {rate}/s"),
            got_rate >= rate_floor,
            format!("published {got_rate:.1}/s >= {rate_floor:.1}/s"),
        );
        report.summary.p50 = Some(p50 / 1e3);
        report.summary.p99 = Some(p99 / 1e3);
    }

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

fn latency_run(rate: f64, n_tasks: usize, dispatchers: usize, rep: usize) -> RunRecord {
    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("bench_tasks"))
        .expect("queue");
    let probe = TaskProbe::new();
    let exec = probe.wrap(Arc::new(SimExecutor(SimBehavior::Echo)));
    let workers: Vec<_> = (0..dispatchers)
        .map(|i| {
            let mut opts = DispatcherOptions::new(
                format!("bench-{i}"),
                "bench_tasks",
                "unused",
                exec.clone(),
            );
            opts.output_queue = None;
            opts.worker_group = Some("bench".to_string());
            spawn_dispatcher(&bus, opts).expect("spawn worker")
        })
        .collect();

    // Paced injection: task i is due at t0 + i/rate.
    let interval = Duration::from_secs_f64(1.0 / rate);
    let mut published: HashMap<String, Instant> = HashMap::with_capacity(n_tasks);
    let t0 = Instant::now();
    for i in 0..n_tasks {
        let due = t0 + interval.mul_f64(i as f64);
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
        let task_id = format!("lat-{rep}-{i}");
        let payload = crate::payload::Payload::new()
            .with("task_id", task_id.as_str())
            .with("block_num", i as i64);
        published.insert(task_id, Instant::now());
        bus.publish("bench_tasks", payload, Default::default())
            .expect("publish");
    }
    let publish_span = t0.elapsed().as_secs_f64();

    let done = wait_for(
        Duration::from_secs(60) + interval.mul_f64(n_tasks as f64),
        Duration::from_millis(2),
        || probe.count() >= n_tasks,
    );
    for w in workers {
        w.stop();
    }
    assert!(done, "latency run stalled: {}/{n_tasks}", probe.count());

    let mut samples: Vec<f64> = probe
        .calls()
        .iter()
        .filter_map(|c| published.get(&c.task_id).map(|t| (c.finished - *t).as_secs_f64()))
        .collect();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (mean, std) = mean_std(&samples);
    let mut run = RunRecord::new(format!("rate={rate} rep={rep}"))
        .value("p50_ms", percentile(&samples, 0.5) * 1e3)
        .value("p99_ms", percentile(&samples, 0.99) * 1e3)
        .value("max_ms", samples.last().copied().unwrap_or(f64::NAN) * 1e3)
        .value("mean_ms", mean * 1e3)
        .value("std_ms", std * 1e3)
        .value("achieved_rate", n_tasks as f64 / publish_span);
    run.samples = samples;
    run
}

#[derive(Debug, Clone)]
pub struct ScalingParams {
    pub dispatcher_counts: Vec<usize>,
    /// Workload is `tasks_per_dispatcher * D` so per-worker work stays fixed.
    pub tasks_per_dispatcher: usize,
    /// Simulated proving time per task.
    pub prover_latency: Duration,
    pub repetitions: usize,
}

impl Default for ScalingParams {
    fn default() -> Self {
        ScalingParams {
            dispatcher_counts: vec![1, 2, 4, 8],
            tasks_per_dispatcher: 10,
            prover_latency: Duration::from_secs(1),
            repetitions: 1,
        }
    }
}

/// Fixed work per worker, growing fleet: throughput should scale linearly
/// while proving dominates, and the 0ms variant exposes pure orchestration
/// contention (efficiency must then fall, never rise, with fleet size).
pub fn bench_scaling(params: &ScalingParams) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new("scaling")
        .param("dispatcher_counts", format!("{:?}", params.dispatcher_counts))
        .param("tasks_per_dispatcher", params.tasks_per_dispatcher)
        .param("prover_latency_ms", params.prover_latency.as_millis())
        .param("repetitions", params.repetitions);

    let mut throughput_by_d: Vec<(usize, f64)> = Vec::new();
    for &d in &params.dispatcher_counts {
        let mut reps = Vec::new();
        for rep in 0..params.repetitions {
            let n = params.tasks_per_dispatcher * d;
            let wall = scaling_run(d, n, params.prover_latency);
            let th = n as f64 / wall;
            reps.push(th);
            report.runs.push(
                RunRecord::new(format!("D={d} rep={rep}"))
                    .value("wall_s", wall)
                    .value("throughput", th),
            );
        }
        throughput_by_d.push((d, median(&reps)));
    }

    let base = throughput_by_d
        .first()
        .map(|(d, th)| th / *d as f64)
        .unwrap_or(f64::NAN);
    let mut efficiencies: Vec<(usize, f64)> = Vec::new();
    for (d, th) in &throughput_by_d {
        let speedup = th / base;
        let eff = speedup / *d as f64;
        efficiencies.push((*d, eff));
        report.runs.push(
            RunRecord::new(format!("D={d} median"))
                .value("throughput", *th)
                .value("speedup", speedup)
                .value("efficiency", eff),
        );
    }
    report.summary.efficiency = efficiencies.last().map(|(_, e)| *e);
    report.summary.throughput = throughput_by_d.last().map(|(_, th)| *th);

    if params.prover_latency >= Duration::from_secs(5) {
        for (d, eff) in &efficiencies {
            report.check(
                &format!("efficiency D={d}"),
                *eff >= SCALING_EFFICIENCY_5S_MIN,
                format!("{:.1}% >= {:.0}%", eff * 1e2, SCALING_EFFICIENCY_5S_MIN * 1e2),
            );
        }
    } else if params.prover_latency >= Duration::from_secs(1) {
        for (d, eff) in &efficiencies {
            report.check(
                &format!("efficiency D={d}"),
                *eff >= SCALING_EFFICIENCY_1S_MIN,
                format!("{:.1}% >= {:.0}%", eff * 1e2, SCALING_EFFICIENCY_1S_MIN * 1e2),
            );
        }
    } else if params.prover_latency.is_zero() {
        for pair in efficiencies.windows(2) {
            let (d0, e0) = pair[0];
            let (d1, e1) = pair[1];
            report.check(
                &format!("efficiency D={d0}->D={d1} declines"),
                e1 <= e0,
                format!("{:.1}% -> {:.1}%", e0 * 1e2, e1 * 1e2),
            );
        }
    }

    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

/// One scaling cell: publish everything, then start the clock *and* the
/// fleet, so spawn cost lands in the measured wall time.
fn scaling_run(d: usize, n: usize, prover_latency: Duration) -> f64 {
    let bus = Bus::in_memory();
    bus.ensure_queue(QueueConfig::new("scale_tasks")).expect("queue");
    for i in 0..n {
        bus.publish(
            "scale_tasks",
            crate::payload::Payload::new()
                .with("task_id", format!("s-{i}"))
                .with("block_num", i as i64),
            Default::default(),
        )
        .expect("publish");
    }

    let probe = TaskProbe::new();
    let exec = probe.wrap(Arc::new(SimExecutor(SimBehavior::Sleep {
        millis: prover_latency.as_millis() as u64,
    })));
    let t0 = Instant::now();
    let workers: Vec<_> = (0..d)
        .map(|i| {
            let mut opts = DispatcherOptions::new(
                format!("scale-{i}"),
                "scale_tasks",
                "unused",
                exec.clone(),
            );
            opts.output_queue = None;
            opts.worker_group = Some("scale".to_string());
            spawn_dispatcher(&bus, opts).expect("spawn worker")
        })
        .collect();

    let budget = Duration::from_secs(120) + prover_latency.mul_f64(n as f64);
    let done = wait_for(budget, Duration::from_millis(2), || probe.count() >= n);
    let wall = probe
        .last_finish()
        .map(|t| (t - t0).as_secs_f64())
        .unwrap_or(f64::NAN);
    for w in workers {
        w.stop();
    }
    assert!(done, "scaling run stalled: {}/{n} at D={d}", probe.count());
    wall
}
