//! Distributed tracing across pipeline stages.
//!
//! Context rides on messages as a `traceparent` header in the W3C format
//! (`00-<32 hex trace id>-<16 hex span id>-<2 hex flags>`), so one proof
//! request can be followed dispatcher → queue → collector → next stage by
//! trace id alone. Finished spans are appended as JSON lines to a span log
//! file and kept in a bounded in-memory ring for inspection.
//!
//! A malformed incoming header never poisons processing: the consumer starts
//! a fresh root trace and bumps a counter instead.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bus::now_unix_ns;
use crate::metrics::Counter;

/// Header key carrying trace context between stages.
pub const TRACEPARENT: &str = "traceparent";

const RING_CAPACITY: usize = 65536;

/// One hop of trace context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceContext {
    pub trace_id: u128,
    pub span_id: u64,
    pub sampled: bool,
}

impl TraceContext {
    pub fn new_root() -> Self {
        // Zero ids are reserved as invalid by the header format.
        let mut trace_id: u128 = rand::random();
        while trace_id == 0 {
            trace_id = rand::random();
        }
        TraceContext {
            trace_id,
            span_id: fresh_span_id(),
            sampled: true,
        }
    }

    /// Same trace, fresh span id.
    pub fn child(&self) -> Self {
        TraceContext {
            trace_id: self.trace_id,
            span_id: fresh_span_id(),
            sampled: self.sampled,
        }
    }

    pub fn to_traceparent(&self) -> String {
        format!(
            "00-{:032x}-{:016x}-{:02x}",
            self.trace_id,
            self.span_id,
            if self.sampled { 1 } else { 0 }
        )
    }

    /// Strict parse: version `00`, exact field widths, lowercase hex,
    /// nonzero trace and span ids.
    pub fn parse(header: &str) -> Option<Self> {
        let mut parts = header.split('-');
        let version = parts.next()?;
        let trace = parts.next()?;
        let span = parts.next()?;
        let flags = parts.next()?;
        if parts.next().is_some() {
            return None;
        }
        if version != "00" || trace.len() != 32 || span.len() != 16 || flags.len() != 2 {
            return None;
        }
        if ![trace, span, flags]
            .iter()
            .all(|s| s.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()))
        {
            return None;
        }
        let trace_id = u128::from_str_radix(trace, 16).ok()?;
        let span_id = u64::from_str_radix(span, 16).ok()?;
        let flag_bits = u8::from_str_radix(flags, 16).ok()?;
        if trace_id == 0 || span_id == 0 {
            return None;
        }
        Some(TraceContext {
            trace_id,
            span_id,
            sampled: flag_bits & 1 == 1,
        })
    }

    pub fn trace_id_hex(&self) -> String {
        format!("{:032x}", self.trace_id)
    }
}

fn fresh_span_id() -> u64 {
    let mut id: u64 = rand::random();
    while id == 0 {
        id = rand::random();
    }
    id
}

/// How an incoming header was interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaderOutcome {
    /// No header present; a new trace began.
    NewRoot,
    /// Valid header; the span continues that trace.
    Continued,
    /// Present but unparseable; a new trace began and the counter (when
    /// provided) was bumped.
    Malformed,
}

/// A finished span as persisted to the log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SpanRecord {
    pub trace_id: String,
    pub span_id: String,
    /// Empty string for root spans.
    pub parent_span_id: String,
    pub name: String,
    pub stage: String,
    pub start_unix_ns: u64,
    pub duration_ns: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

struct SpanLogInner {
    file: Mutex<Option<File>>,
    ring: Mutex<VecDeque<SpanRecord>>,
    path: Option<PathBuf>,
}

/// Sink for finished spans: an optional JSON-lines file plus an in-memory
/// ring of the most recent [`RING_CAPACITY`] records. Clones share state.
#[derive(Clone)]
pub struct SpanLog {
    inner: Arc<SpanLogInner>,
}

impl SpanLog {
    /// In-memory only.
    pub fn new() -> Self {
        SpanLog {
            inner: Arc::new(SpanLogInner {
                file: Mutex::new(None),
                ring: Mutex::new(VecDeque::new()),
                path: None,
            }),
        }
    }

    /// Also append each span to `path` as one JSON object per line.
    pub fn with_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = File::options().create(true).append(true).open(&path)?;
        Ok(SpanLog {
            inner: Arc::new(SpanLogInner {
                file: Mutex::new(Some(file)),
                ring: Mutex::new(VecDeque::new()),
                path: Some(path),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.inner.path.as_deref()
    }

    /// Start a root span (no parent) or a child of `parent`.
    pub fn start(
        &self,
        name: impl Into<String>,
        stage: impl Into<String>,
        parent: Option<&TraceContext>,
    ) -> Span {
        let (ctx, parent_span) = match parent {
            Some(p) => (p.child(), Some(p.span_id)),
            None => (TraceContext::new_root(), None),
        };
        Span {
            log: self.clone(),
            ctx,
            parent_span,
            name: name.into(),
            stage: stage.into(),
            start_unix_ns: now_unix_ns(),
            start: Instant::now(),
            attributes: BTreeMap::new(),
            finished: false,
        }
    }

    /// Start a span continuing whatever context `headers` carry. A missing
    /// header starts a new root; a malformed one starts a new root and bumps
    /// `malformed` (when given) so the corruption is visible.
    pub fn start_from_headers(
        &self,
        name: impl Into<String>,
        stage: impl Into<String>,
        headers: &BTreeMap<String, String>,
        malformed: Option<&Counter>,
    ) -> (Span, HeaderOutcome) {
        match headers.get(TRACEPARENT) {
            None => (self.start(name, stage, None), HeaderOutcome::NewRoot),
            Some(h) => match TraceContext::parse(h) {
                Some(ctx) => (
                    self.start(name, stage, Some(&ctx)),
                    HeaderOutcome::Continued,
                ),
                None => {
                    if let Some(c) = malformed {
                        c.inc();
                    }
                    (self.start(name, stage, None), HeaderOutcome::Malformed)
                }
            },
        }
    }

    fn record(&self, rec: SpanRecord) {
        {
            let mut ring = self.inner.ring.lock();
            if ring.len() == RING_CAPACITY {
                ring.pop_front();
            }
            ring.push_back(rec.clone());
        }
        let mut file = self.inner.file.lock();
        if let Some(f) = file.as_mut() {
            if let Ok(line) = serde_json::to_string(&rec) {
                let _ = writeln!(f, "{line}");
                let _ = f.flush();
            }
        }
    }

    /// Recent spans, oldest first.
    pub fn records(&self) -> Vec<SpanRecord> {
        self.inner.ring.lock().iter().cloned().collect()
    }

    pub fn records_for_trace(&self, trace_id_hex: &str) -> Vec<SpanRecord> {
        self.inner
            .ring
            .lock()
            .iter()
            .filter(|r| r.trace_id == trace_id_hex)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.ring.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for SpanLog {
    fn default() -> Self {
        Self::new()
    }
}

/// A live span. Finishing (or dropping) it appends the record to the log.
pub struct Span {
    log: SpanLog,
    pub ctx: TraceContext,
    parent_span: Option<u64>,
    name: String,
    stage: String,
    start_unix_ns: u64,
    start: Instant,
    attributes: BTreeMap<String, String>,
    finished: bool,
}

impl Span {
    pub fn set_attr(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.attributes.insert(key.into(), value.into());
    }

    /// The header value downstream messages should carry to continue this
    /// trace.
    pub fn traceparent(&self) -> String {
        self.ctx.to_traceparent()
    }

    pub fn finish(mut self) {
        self.finish_inner();
    }

    fn finish_inner(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        let rec = SpanRecord {
            trace_id: self.ctx.trace_id_hex(),
            span_id: format!("{:016x}", self.ctx.span_id),
            parent_span_id: self
                .parent_span
                .map(|p| format!("{p:016x}"))
                .unwrap_or_default(),
            name: std::mem::take(&mut self.name),
            stage: std::mem::take(&mut self.stage),
            start_unix_ns: self.start_unix_ns,
            duration_ns: self.start.elapsed().as_nanos() as u64,
            attributes: std::mem::take(&mut self.attributes),
        };
        self.log.clone().record(rec);
    }
}

impl Drop for Span {
    fn drop(&mut self) {
        self.finish_inner();
    }
}
