//! Task executors: how a worker turns an input payload into an output
//! payload.
//!
//! Three families cover the deployment spectrum:
//!
//! - **Subprocess** provers — the production shape. The worker writes the
//!   input payload to a scratch file, invokes the prover binary with
//!   `--input-path`/`--output-path` arguments, and reads the output payload
//!   back on exit 0. Failures keep the scratch directory (with the input and
//!   a stderr tail) for post-mortems.
//! - **In-process** executors registered by name — for embedding proving
//!   logic (or stubs) directly in the worker process.
//! - **Simulated** provers — deterministic stand-ins used by benchmarks and
//!   chaos experiments: echo, fixed sleep, per-task payload-driven delay,
//!   and a poison variant that stalls one chosen task.
//!
//! Executors receive a heartbeat hook and must call it at least every few
//! hundred milliseconds of wall time so the worker can extend its delivery
//! lease under tasks that outlive the ack window.

use std::collections::HashMap;
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::payload::Payload;

/// How long executors may go between heartbeat calls while waiting.
const HEARTBEAT_SLICE: Duration = Duration::from_millis(100);
/// Kept stderr suffix on subprocess failure.
const STDERR_TAIL_BYTES: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("failed to start `{program}`: {source}")]
    Spawn {
        program: String,
        source: std::io::Error,
    },
    #[error("prover exited with {status}; scratch kept at {}; stderr tail:\n{stderr_tail}", kept_dir.display())]
    Failed {
        status: String,
        stderr_tail: String,
        kept_dir: PathBuf,
    },
    #[error("prover output unusable ({detail}); scratch kept at {}", kept_dir.display())]
    BadOutput { detail: String, kept_dir: PathBuf },
    #[error("executor error: {0}")]
    Internal(String),
}

/// Per-attempt context handed to an executor.
pub struct ExecutionContext<'a> {
    /// Extends the delivery lease; call it at least every few hundred
    /// milliseconds during long work.
    pub heartbeat: &'a (dyn Fn() + Sync),
    /// 0 on the first attempt, incremented per redelivery.
    pub attempt: u32,
    pub task_id: Option<&'a str>,
}

pub trait TaskExecutor: Send + Sync {
    fn execute(&self, input: &Payload, ctx: &ExecutionContext) -> Result<Payload, ExecError>;
}

impl<F> TaskExecutor for F
where
    F: Fn(&Payload, &ExecutionContext) -> Result<Payload, ExecError> + Send + Sync,
{
    fn execute(&self, input: &Payload, ctx: &ExecutionContext) -> Result<Payload, ExecError> {
        self(input, ctx)
    }
}

/// Sleep in heartbeat-friendly slices.
pub fn sliced_sleep(total: Duration, ctx: &ExecutionContext) {
    let end = Instant::now() + total;
    loop {
        (ctx.heartbeat)();
        let now = Instant::now();
        if now >= end {
            return;
        }
        std::thread::sleep((end - now).min(HEARTBEAT_SLICE));
    }
}

// ---------------------------------------------------------------------------
// Simulated provers
// ---------------------------------------------------------------------------

/// Deterministic stand-ins for a prover binary.
#[derive(Debug, Clone, PartialEq)]
pub enum SimBehavior {
    /// Output = input plus `proved: true`.
    Echo,
    /// Echo after a fixed busy period.
    Sleep { millis: u64 },
    /// Echo after a per-task busy period read from an integer payload field
    /// (milliseconds; absent or negative means no delay). Lets one workload
    /// file drive skewed task mixes.
    PayloadDelay { field: String },
    /// Echo after `base_millis`, plus `extra_millis` for the single task
    /// whose `field` equals `group_value` and whose `task_index` equals
    /// `task_index` — a reproducible straggler.
    Poison {
        base_millis: u64,
        field: String,
        group_value: i64,
        task_index: i64,
        extra_millis: u64,
    },
}

pub struct SimExecutor(pub SimBehavior);

impl TaskExecutor for SimExecutor {
    fn execute(&self, input: &Payload, ctx: &ExecutionContext) -> Result<Payload, ExecError> {
        let delay = match &self.0 {
            SimBehavior::Echo => Duration::ZERO,
            SimBehavior::Sleep { millis } => Duration::from_millis(*millis),
            SimBehavior::PayloadDelay { field } => {
                let ms = input.get_int(field).unwrap_or(0).max(0) as u64;
                Duration::from_millis(ms)
            }
            SimBehavior::Poison {
                base_millis,
                field,
                group_value,
                task_index,
                extra_millis,
            } => {
                let hit = input.get_int(field) == Some(*group_value)
                    && input.get_int("task_index") == Some(*task_index);
                Duration::from_millis(base_millis + if hit { *extra_millis } else { 0 })
            }
        };
        if !delay.is_zero() {
            sliced_sleep(delay, ctx);
        }
        Ok(input.clone().with("proved", true))
    }
}

// ---------------------------------------------------------------------------
// In-process registry
// ---------------------------------------------------------------------------

/// Named executors callable without leaving the process. Clones share the
/// registry.
#[derive(Clone, Default)]
pub struct InProcessRegistry {
    map: Arc<RwLock<HashMap<String, Arc<dyn TaskExecutor>>>>,
}

impl InProcessRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, name: impl Into<String>, exec: Arc<dyn TaskExecutor>) {
        self.map.write().insert(name.into(), exec);
    }

    pub fn register_fn<F>(&self, name: impl Into<String>, f: F)
    where
        F: Fn(&Payload, &ExecutionContext) -> Result<Payload, ExecError> + Send + Sync + 'static,
    {
        self.register(name, Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn TaskExecutor>> {
        self.map.read().get(name).cloned()
    }
}

// ---------------------------------------------------------------------------
// Subprocess prover
// ---------------------------------------------------------------------------

pub struct SubprocessExecutor {
    pub program: String,
    pub args: Vec<String>,
}

impl TaskExecutor for SubprocessExecutor {
    fn execute(&self, input: &Payload, ctx: &ExecutionContext) -> Result<Payload, ExecError> {
        let dir = tempfile::Builder::new()
            .prefix("prover-task-")
            .tempdir()
            .map_err(|e| ExecError::Internal(format!("scratch dir: {e}")))?;
        let input_path = dir.path().join("input.json");
        let output_path = dir.path().join("output.json");
        std::fs::write(&input_path, input.canonical())
            .map_err(|e| ExecError::Internal(format!("write input: {e}")))?;

        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg("--input-path")
            .arg(&input_path)
            .arg("--output-path")
            .arg(&output_path)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| ExecError::Spawn {
                program: self.program.clone(),
                source,
            })?;

        // Drain stderr concurrently (a chatty prover must not deadlock on a
        // full pipe), keeping only the tail.
        let stderr_tail: Arc<Mutex<Vec<u8>>> = Arc::new(Mutex::new(Vec::new()));
        let drain = {
            let tail = stderr_tail.clone();
            let mut pipe = child.stderr.take().expect("stderr was piped");
            std::thread::spawn(move || {
                let mut buf = [0u8; 8192];
                while let Ok(n) = pipe.read(&mut buf) {
                    if n == 0 {
                        break;
                    }
                    let mut tail = tail.lock();
                    tail.extend_from_slice(&buf[..n]);
                    let excess = tail.len().saturating_sub(STDERR_TAIL_BYTES);
                    if excess > 0 {
                        tail.drain(..excess);
                    }
                }
            })
        };

        let status = loop {
            (ctx.heartbeat)();
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => std::thread::sleep(Duration::from_millis(25)),
                Err(e) => {
                    let _ = child.kill();
                    return Err(ExecError::Internal(format!("wait on prover: {e}")));
                }
            }
        };
        let _ = drain.join();

        if !status.success() {
            let tail = String::from_utf8_lossy(&stderr_tail.lock()).into_owned();
            // Keep the scratch directory for inspection.
            let kept_dir = dir.keep();
            return Err(ExecError::Failed {
                status: status.to_string(),
                stderr_tail: tail,
                kept_dir,
            });
        }
        let raw = match std::fs::read_to_string(&output_path) {
            Ok(s) => s,
            Err(e) => {
                let kept_dir = dir.keep();
                return Err(ExecError::BadOutput {
                    detail: format!("missing output file: {e}"),
                    kept_dir,
                });
            }
        };
        match Payload::from_canonical(&raw) {
            Ok(p) => Ok(p),
            Err(e) => {
                let kept_dir = dir.keep();
                Err(ExecError::BadOutput {
                    detail: e.to_string(),
                    kept_dir,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Declarative spec
// ---------------------------------------------------------------------------

/// Executor configuration as written in pipeline files.
///
/// String forms:
/// - `sim:echo`
/// - `sim:sleep:<millis>`
/// - `sim:delay:<payload-field>`
/// - `proc:<registered-name>`
/// - `exec:<program> [args...]` (whitespace-split)
#[derive(Debug, Clone, PartialEq)]
pub enum ExecutorSpec {
    Subprocess { program: String, args: Vec<String> },
    InProcess { name: String },
    Simulated(SimBehavior),
}

impl ExecutorSpec {
    pub fn parse(s: &str) -> Result<ExecutorSpec, String> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("sim:") {
            return match rest.split_once(':') {
                None if rest == "echo" => Ok(ExecutorSpec::Simulated(SimBehavior::Echo)),
                Some(("sleep", ms)) => ms
                    .parse::<u64>()
                    .map(|millis| ExecutorSpec::Simulated(SimBehavior::Sleep { millis }))
                    .map_err(|_| format!("bad sleep duration `{ms}`")),
                Some(("delay", field)) if !field.is_empty() => Ok(ExecutorSpec::Simulated(
                    SimBehavior::PayloadDelay {
                        field: field.to_string(),
                    },
                )),
                _ => Err(format!("unknown simulated executor `{s}`")),
            };
        }
        if let Some(name) = s.strip_prefix("proc:") {
            if name.is_empty() {
                return Err("proc: requires a registered name".to_string());
            }
            return Ok(ExecutorSpec::InProcess {
                name: name.to_string(),
            });
        }
        if let Some(cmd) = s.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| "exec: requires a program".to_string())?;
            return Ok(ExecutorSpec::Subprocess {
                program: program.to_string(),
                args: parts.map(|p| p.to_string()).collect(),
            });
        }
        Err(format!(
            "unknown executor `{s}` (expected sim:/proc:/exec: prefix)"
        ))
    }

    pub fn build(
        &self,
        registry: &InProcessRegistry,
    ) -> Result<Arc<dyn TaskExecutor>, ExecError> {
        match self {
            ExecutorSpec::Subprocess { program, args } => Ok(Arc::new(SubprocessExecutor {
                program: program.clone(),
                args: args.clone(),
            })),
            ExecutorSpec::InProcess { name } => registry.get(name).ok_or_else(|| {
                ExecError::Internal(format!("no in-process executor registered as `{name}`"))
            }),
            ExecutorSpec::Simulated(b) => Ok(Arc::new(SimExecutor(b.clone()))),
        }
    }
}

impl std::fmt::Display for ExecutorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExecutorSpec::Subprocess { program, args } => {
                write!(f, "exec:{program}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                Ok(())
            }
            ExecutorSpec::InProcess { name } => write!(f, "proc:{name}"),
            ExecutorSpec::Simulated(SimBehavior::Echo) => write!(f, "sim:echo"),
            ExecutorSpec::Simulated(SimBehavior::Sleep { millis }) => {
                write!(f, "sim:sleep:{millis}")
            }
            ExecutorSpec::Simulated(SimBehavior::PayloadDelay { field }) => {
                write!(f, "sim:delay:{field}")
            }
            ExecutorSpec::Simulated(SimBehavior::Poison { .. }) => write!(f, "sim:poison"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn noop_ctx() -> ExecutionContext<'static> {
        static NOOP: fn() = || {};
        ExecutionContext {
            heartbeat: &NOOP,
            attempt: 0,
            task_id: None,
        }
    }

    #[test]
    fn echo_preserves_fields_and_marks_proved() {
        let exec = SimExecutor(SimBehavior::Echo);
        let input = Payload::new().with("block_num", 9i64).with("task_id", "t-9");
        let out = exec.execute(&input, &noop_ctx()).unwrap();
        assert_eq!(out.get_int("block_num"), Some(9));
        assert_eq!(out.task_id(), Some("t-9"));
        assert_eq!(out.get_bool("proved"), Some(true));
    }

    #[test]
    fn sleep_ticks_the_heartbeat_while_waiting() {
        let beats = AtomicU32::new(0);
        let hb = || {
            beats.fetch_add(1, Ordering::Relaxed);
        };
        let ctx = ExecutionContext {
            heartbeat: &hb,
            attempt: 0,
            task_id: None,
        };
        let t0 = Instant::now();
        SimExecutor(SimBehavior::Sleep { millis: 250 })
            .execute(&Payload::new(), &ctx)
            .unwrap();
        assert!(t0.elapsed() >= Duration::from_millis(250));
        assert!(beats.load(Ordering::Relaxed) >= 3, "a beat per ~100ms slice");
    }

    #[test]
    fn payload_delay_reads_the_field_and_defaults_to_zero() {
        let exec = SimExecutor(SimBehavior::PayloadDelay {
            field: "delay_ms".to_string(),
        });
        let t0 = Instant::now();
        exec.execute(&Payload::new().with("delay_ms", 120i64), &noop_ctx())
            .unwrap();
        assert!(t0.elapsed() >= Duration::from_millis(120));
        let t0 = Instant::now();
        exec.execute(&Payload::new(), &noop_ctx()).unwrap();
        assert!(t0.elapsed() < Duration::from_millis(60), "absent field means no delay");
    }

    #[test]
    fn poison_hits_exactly_the_chosen_task() {
        let exec = SimExecutor(SimBehavior::Poison {
            base_millis: 0,
            field: "block_num".to_string(),
            group_value: 4,
            task_index: 2,
            extra_millis: 150,
        });
        let hit = Payload::new().with("block_num", 4i64).with("task_index", 2i64);
        let miss = Payload::new().with("block_num", 4i64).with("task_index", 3i64);
        let t0 = Instant::now();
        exec.execute(&miss, &noop_ctx()).unwrap();
        assert!(t0.elapsed() < Duration::from_millis(60));
        let t0 = Instant::now();
        exec.execute(&hit, &noop_ctx()).unwrap();
        assert!(t0.elapsed() >= Duration::from_millis(150));
    }

    #[test]
    fn registry_resolves_named_executors() {
        let reg = InProcessRegistry::new();
        reg.register_fn("double", |p: &Payload, _ctx: &ExecutionContext| {
            let n = p.get_int("n").unwrap_or(0);
            Ok(p.clone().with("n", n * 2))
        });
        let spec = ExecutorSpec::parse("proc:double").unwrap();
        let exec = spec.build(&reg).unwrap();
        let out = exec
            .execute(&Payload::new().with("n", 21i64), &noop_ctx())
            .unwrap();
        assert_eq!(out.get_int("n"), Some(42));
        assert!(ExecutorSpec::parse("proc:missing").unwrap().build(&reg).is_err());
    }

    #[test]
    fn spec_strings_parse_and_display_round_trip() {
        for s in ["sim:echo", "sim:sleep:250", "sim:delay:delay_ms", "proc:stub", "exec:/usr/bin/prover --fast"] {
            let spec = ExecutorSpec::parse(s).unwrap();
            assert_eq!(spec.to_string(), s, "round trip of `{s}`");
        }
        for bad in ["", "sim:", "sim:sleep:abc", "sim:delay:", "proc:", "exec:", "mystery"] {
            assert!(ExecutorSpec::parse(bad).is_err(), "accepted `{bad}`");
        }
    }

    fn write_script(dir: &std::path::Path, name: &str, body: &str) -> String {
        use std::os::unix::fs::PermissionsExt;
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        path.display().to_string()
    }

    #[test]
    fn subprocess_prover_round_trips_payloads_via_files() {
        let dir = tempfile::tempdir().unwrap();
        // An "echo prover": copies the input payload to the output path.
        let script = write_script(
            dir.path(),
            "echo-prover",
            "#!/bin/sh\n[ \"$1\" = --input-path ] || exit 9\n[ \"$3\" = --output-path ] || exit 9\ncp \"$2\" \"$4\"\n",
        );
        let exec = SubprocessExecutor {
            program: script,
            args: vec![],
        };
        let input = Payload::new().with("block_num", 3i64).with("witness", "w-3");
        let out = exec.execute(&input, &noop_ctx()).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn subprocess_failure_keeps_the_scratch_dir_and_stderr_tail() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(
            dir.path(),
            "broken-prover",
            "#!/bin/sh\necho 'constraint system unsatisfiable' >&2\nexit 3\n",
        );
        let exec = SubprocessExecutor {
            program: script,
            args: vec![],
        };
        let err = exec
            .execute(&Payload::new().with("block_num", 1i64), &noop_ctx())
            .unwrap_err();
        match err {
            ExecError::Failed {
                status,
                stderr_tail,
                kept_dir,
            } => {
                assert!(status.contains('3'), "status was: {status}");
                assert!(stderr_tail.contains("constraint system unsatisfiable"));
                assert!(kept_dir.join("input.json").is_file(), "input kept for replay");
                std::fs::remove_dir_all(kept_dir).ok();
            }
            other => panic!("expected Failed, got {other}"),
        }
    }

    #[test]
    fn subprocess_bad_output_is_reported_not_propagated() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(
            dir.path(),
            "liar-prover",
            "#!/bin/sh\necho 'not json at all' > \"$4\"\n",
        );
        let exec = SubprocessExecutor {
            program: script,
            args: vec![],
        };
        let err = exec.execute(&Payload::new(), &noop_ctx()).unwrap_err();
        match err {
            ExecError::BadOutput { kept_dir, .. } => {
                std::fs::remove_dir_all(kept_dir).ok();
            }
            other => panic!("expected BadOutput, got {other}"),
        }
        // Missing output entirely.
        let script = write_script(dir.path(), "silent-prover", "#!/bin/sh\nexit 0\n");
        let exec = SubprocessExecutor {
            program: script,
            args: vec![],
        };
        let err = exec.execute(&Payload::new(), &noop_ctx()).unwrap_err();
        match err {
            ExecError::BadOutput { detail, kept_dir } => {
                assert!(detail.contains("missing output"));
                std::fs::remove_dir_all(kept_dir).ok();
            }
            other => panic!("expected BadOutput, got {other}"),
        }
    }

    #[test]
    fn spawn_failure_names_the_program() {
        let exec = SubprocessExecutor {
            program: "/no/such/prover".to_string(),
            args: vec![],
        };
        let err = exec.execute(&Payload::new(), &noop_ctx()).unwrap_err();
        assert!(matches!(err, ExecError::Spawn { .. }));
        assert!(err.to_string().contains("/no/such/prover"));
    }
}
