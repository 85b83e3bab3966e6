//! Benchmark, experiment, and chaos harness.
//!
//! Reproduces the reference workloads at desk scale: latency and scaling
//! benchmarks, partition-affinity and multi-queue experiments, ordered
//! commitment, memory bounds under skew, fault injection with loss audits,
//! and randomized property suites. Every entry point takes a seed and a
//! parameter struct with the reference defaults, runs against a fresh
//! in-memory bus, and returns an [`ExperimentReport`] whose verdicts encode
//! the acceptance thresholds. [`verify::verify`] runs the whole gate.
//!
//! Durations are measured on the monotonic clock; wall-clock time appears
//! only in report metadata. Identical seeds produce identical workloads.

pub mod bench;
pub mod chaos;
pub mod experiments;
pub mod properties;
pub mod report;
pub mod verify;

pub use report::{
    mean_std, median, percentile, write_reports, ExperimentReport, RunRecord, Summary, Verdict,
};

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bus::{Bus, BusError, ConsumerHandle};
use crate::executor::{ExecError, ExecutionContext, TaskExecutor};
use crate::payload::Payload;

/// Deterministic generator for workload construction.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Poll `cond` every `poll` until it holds or `timeout` elapses.
pub fn wait_for(timeout: Duration, poll: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= deadline {
            return cond();
        }
        std::thread::sleep(poll);
    }
}

/// One observed executor invocation.
#[derive(Debug, Clone)]
pub struct TaskCall {
    pub task_id: String,
    pub attempt: u32,
    pub started: Instant,
    pub finished: Instant,
}

/// Records every executor invocation across a worker fleet — who ran, when,
/// and on which attempt — without touching the result. Wrap the real executor
/// with [`TaskProbe::wrap`] and hand the wrapper to the workers.
#[derive(Clone, Default)]
pub struct TaskProbe {
    calls: Arc<Mutex<Vec<TaskCall>>>,
}

impl TaskProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn wrap(&self, inner: Arc<dyn TaskExecutor>) -> Arc<dyn TaskExecutor> {
        let calls = self.calls.clone();
        Arc::new(
            move |input: &Payload, ctx: &ExecutionContext| -> Result<Payload, ExecError> {
                let started = Instant::now();
                let out = inner.execute(input, ctx);
                calls.lock().push(TaskCall {
                    task_id: ctx
                        .task_id
                        .or_else(|| input.task_id())
                        .unwrap_or("")
                        .to_string(),
                    attempt: ctx.attempt,
                    started,
                    finished: Instant::now(),
                });
                out
            },
        )
    }

    pub fn count(&self) -> usize {
        self.calls.lock().len()
    }

    pub fn calls(&self) -> Vec<TaskCall> {
        self.calls.lock().clone()
    }

    /// Earliest execution start strictly after `t`, if any.
    pub fn first_start_after(&self, t: Instant) -> Option<Instant> {
        self.calls
            .lock()
            .iter()
            .map(|c| c.started)
            .filter(|s| *s > t)
            .min()
    }

    /// Latest recorded finish, if any.
    pub fn last_finish(&self) -> Option<Instant> {
        self.calls.lock().iter().map(|c| c.finished).max()
    }
}

/// A read-only observer on one queue. Audits join a worker group of their
/// own, so they see every message the processing fleet sees without stealing
/// any — the loss checks in the chaos suite hinge on that. Attach *before*
/// injecting the workload.
pub struct Audit {
    records: Arc<Mutex<Vec<Payload>>>,
    stop: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Audit {
    pub fn attach(bus: &Bus, queue: &str) -> Result<Audit, BusError> {
        // Unique group per audit: two observers on one queue must not split
        // the stream between them.
        static AUDIT_SEQ: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
        let n = AUDIT_SEQ.fetch_add(1, Ordering::Relaxed);
        let consumer = bus.consumer(
            ConsumerHandle::new(queue)
                .group(format!("{queue}-audit{n}"))
                .inflight_window(4096),
        )?;
        let records: Arc<Mutex<Vec<Payload>>> = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let records = records.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match consumer.next_timeout(Duration::from_millis(20)) {
                        Ok(Some(d)) => {
                            records.lock().push(d.envelope.payload.clone());
                            let _ = consumer.ack(&d);
                        }
                        Ok(None) => {}
                        Err(_) => break,
                    }
                }
            })
        };
        Ok(Audit {
            records,
            stop,
            thread: Some(thread),
        })
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<Payload> {
        self.records.lock().clone()
    }

    /// Distinct values of an integer field across all records.
    pub fn distinct_int(&self, field: &str) -> std::collections::BTreeSet<i64> {
        self.records
            .lock()
            .iter()
            .filter_map(|p| p.get_int(field))
            .collect()
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Audit {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{SimBehavior, SimExecutor};

    #[test]
    fn probe_records_every_invocation_without_changing_results() {
        let probe = TaskProbe::new();
        let exec = probe.wrap(Arc::new(SimExecutor(SimBehavior::Echo)));
        let noop: fn() = || {};
        let ctx = ExecutionContext {
            heartbeat: &noop,
            attempt: 2,
            task_id: Some("t-7"),
        };
        let out = exec
            .execute(&Payload::new().with("block_num", 7i64), &ctx)
            .unwrap();
        assert_eq!(out.get_bool("proved"), Some(true));
        let calls = probe.calls();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].task_id, "t-7");
        assert_eq!(calls[0].attempt, 2);
        assert!(calls[0].finished >= calls[0].started);
    }

    #[test]
    fn audit_sees_messages_without_stealing_from_workers() {
        let bus = Bus::in_memory();
        bus.ensure_queue(crate::bus::QueueConfig::new("q")).unwrap();
        let audit = Audit::attach(&bus, "q").unwrap();
        let worker = bus.consumer(ConsumerHandle::new("q")).unwrap();
        for i in 0..5i64 {
            bus.publish("q", Payload::new().with("block_num", i), Default::default())
                .unwrap();
        }
        let mut seen = 0;
        while let Some(d) = worker.next_timeout(Duration::from_millis(200)).unwrap() {
            worker.ack(&d).unwrap();
            seen += 1;
            if seen == 5 {
                break;
            }
        }
        assert_eq!(seen, 5, "the audit group must not intercept work");
        assert!(wait_for(
            Duration::from_secs(2),
            Duration::from_millis(5),
            || audit.len() == 5
        ));
        assert_eq!(
            audit.distinct_int("block_num").len(),
            5,
            "audit saw each message once"
        );
        audit.stop();
    }

    #[test]
    fn identical_seeds_yield_identical_draws() {
        use rand::Rng;
        let a: Vec<u64> = (0..32).map(|_| rng(42).gen()).collect();
        let mut r = rng(42);
        let b: Vec<u64> = (0..32).map(|_| r.gen()).collect();
        assert_eq!(a[0], b[0]);
        let mut r2 = rng(43);
        assert_ne!(b, (0..32).map(|_| r2.gen()).collect::<Vec<u64>>());
    }
}
