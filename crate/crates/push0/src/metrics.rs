//! Metrics registry and scrape endpoint.
//!
//! Counters, gauges, and latency histograms keyed by name plus a small label
//! set, rendered in the Prometheus text exposition format (version 0.0.4)
//! over a plain blocking HTTP listener. Histograms use 31 log-spaced buckets
//! from 0.1ms to 60s — wide enough to cover both bus hops and multi-minute
//! proofs in one layout — plus a +Inf overflow bucket.
//!
//! Handles are cheap to clone and lock-free on the hot path (atomic
//! increments); the registry itself is only locked when a new (name, labels)
//! series first appears or when the endpoint renders a scrape.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use parking_lot::Mutex;

/// Number of finite histogram buckets.
pub const HISTOGRAM_BUCKETS: usize = 31;

/// Upper bounds (seconds) of the finite buckets: log-spaced over
/// `[0.0001, 60]`.
pub fn bucket_bounds() -> &'static [f64; HISTOGRAM_BUCKETS] {
    static BOUNDS: OnceLock<[f64; HISTOGRAM_BUCKETS]> = OnceLock::new();
    BOUNDS.get_or_init(|| {
        let lo = 0.0001f64;
        let hi = 60.0f64;
        let mut out = [0.0; HISTOGRAM_BUCKETS];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = lo * (hi / lo).powf(i as f64 / (HISTOGRAM_BUCKETS - 1) as f64);
        }
        out[HISTOGRAM_BUCKETS - 1] = hi;
        out
    })
}

#[derive(Clone)]
pub struct Counter(Arc<AtomicU64>);

impl Counter {
    pub fn inc(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

#[derive(Clone)]
pub struct Gauge(Arc<AtomicI64>);

impl Gauge {
    pub fn set(&self, v: i64) {
        self.0.store(v, Ordering::Relaxed);
    }

    pub fn add(&self, v: i64) {
        self.0.fetch_add(v, Ordering::Relaxed);
    }

    pub fn get(&self) -> i64 {
        self.0.load(Ordering::Relaxed)
    }
}

pub struct HistogramInner {
    /// Finite buckets plus one overflow slot.
    buckets: [AtomicU64; HISTOGRAM_BUCKETS + 1],
    count: AtomicU64,
    /// Sum kept in integer microseconds so it stays atomic.
    sum_micros: AtomicU64,
}

#[derive(Clone)]
pub struct Histogram(Arc<HistogramInner>);

impl Histogram {
    fn new() -> Self {
        Histogram(Arc::new(HistogramInner {
            buckets: std::array::from_fn(|_| AtomicU64::new(0)),
            count: AtomicU64::new(0),
            sum_micros: AtomicU64::new(0),
        }))
    }

    /// Record one observation, in seconds.
    pub fn observe(&self, seconds: f64) {
        let seconds = if seconds.is_finite() && seconds >= 0.0 {
            seconds
        } else {
            0.0
        };
        let bounds = bucket_bounds();
        let idx = bounds
            .iter()
            .position(|b| seconds <= *b)
            .unwrap_or(HISTOGRAM_BUCKETS);
        self.0.buckets[idx].fetch_add(1, Ordering::Relaxed);
        self.0.count.fetch_add(1, Ordering::Relaxed);
        self.0
            .sum_micros
            .fetch_add((seconds * 1e6).round() as u64, Ordering::Relaxed);
    }

    pub fn observe_duration(&self, d: Duration) {
        self.observe(d.as_secs_f64());
    }

    pub fn count(&self) -> u64 {
        self.0.count.load(Ordering::Relaxed)
    }

    pub fn sum_seconds(&self) -> f64 {
        self.0.sum_micros.load(Ordering::Relaxed) as f64 / 1e6
    }

    pub fn mean_seconds(&self) -> f64 {
        let n = self.count();
        if n == 0 {
            0.0
        } else {
            self.sum_seconds() / n as f64
        }
    }

    /// Estimate the `q`-quantile (0..=1) as the upper bound of the bucket
    /// where the cumulative count crosses `q * total`. Observations beyond
    /// the last finite bucket report that bound, so the estimate is always
    /// finite.
    pub fn quantile(&self, q: f64) -> f64 {
        let total = self.count();
        if total == 0 {
            return 0.0;
        }
        let target = ((q.clamp(0.0, 1.0) * total as f64).ceil() as u64).max(1);
        let bounds = bucket_bounds();
        let mut cumulative = 0u64;
        for (i, b) in self.0.buckets.iter().enumerate() {
            cumulative += b.load(Ordering::Relaxed);
            if cumulative >= target {
                return bounds[i.min(HISTOGRAM_BUCKETS - 1)];
            }
        }
        bounds[HISTOGRAM_BUCKETS - 1]
    }

    fn snapshot(&self) -> ([u64; HISTOGRAM_BUCKETS + 1], u64, f64) {
        let buckets = std::array::from_fn(|i| self.0.buckets[i].load(Ordering::Relaxed));
        (buckets, self.count(), self.sum_seconds())
    }
}

type SeriesKey = (String, Vec<(String, String)>);

#[derive(Default)]
struct RegistryInner {
    counters: Mutex<BTreeMap<SeriesKey, Counter>>,
    gauges: Mutex<BTreeMap<SeriesKey, Gauge>>,
    histograms: Mutex<BTreeMap<SeriesKey, Histogram>>,
}

/// The process-wide metric store. Clones share state.
#[derive(Clone, Default)]
pub struct MetricsRegistry {
    inner: Arc<RegistryInner>,
}

impl std::fmt::Debug for MetricsRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("MetricsRegistry")
    }
}

fn series_key(name: &str, labels: &[(&str, &str)]) -> SeriesKey {
    let mut labels: Vec<(String, String)> = labels
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    labels.sort();
    (name.to_string(), labels)
}

impl MetricsRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counter(&self, name: &str, labels: &[(&str, &str)]) -> Counter {
        self.inner
            .counters
            .lock()
            .entry(series_key(name, labels))
            .or_insert_with(|| Counter(Arc::new(AtomicU64::new(0))))
            .clone()
    }

    pub fn gauge(&self, name: &str, labels: &[(&str, &str)]) -> Gauge {
        self.inner
            .gauges
            .lock()
            .entry(series_key(name, labels))
            .or_insert_with(|| Gauge(Arc::new(AtomicI64::new(0))))
            .clone()
    }

    pub fn histogram(&self, name: &str, labels: &[(&str, &str)]) -> Histogram {
        self.inner
            .histograms
            .lock()
            .entry(series_key(name, labels))
            .or_insert_with(Histogram::new)
            .clone()
    }

    /// Render every series in the Prometheus text exposition format.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(4096);
        let mut last_type: Option<(String, String)> = None;
        let mut type_line = |out: &mut String, name: &str, kind: &str| {
            if last_type.as_ref().map(|(n, k)| (n.as_str(), k.as_str())) != Some((name, kind)) {
                out.push_str(&format!("# TYPE {name} {kind}\n"));
                last_type = Some((name.to_string(), kind.to_string()));
            }
        };

        for ((name, labels), c) in self.inner.counters.lock().iter() {
            type_line(&mut out, name, "counter");
            out.push_str(&format!(
                "{name}{} {}\n",
                render_labels(labels, None),
                c.get()
            ));
        }
        for ((name, labels), g) in self.inner.gauges.lock().iter() {
            type_line(&mut out, name, "gauge");
            out.push_str(&format!(
                "{name}{} {}\n",
                render_labels(labels, None),
                g.get()
            ));
        }
        for ((name, labels), h) in self.inner.histograms.lock().iter() {
            type_line(&mut out, name, "histogram");
            let (buckets, count, sum) = h.snapshot();
            let bounds = bucket_bounds();
            let mut cumulative = 0u64;
            for (i, n) in buckets.iter().enumerate() {
                cumulative += n;
                let le = if i < HISTOGRAM_BUCKETS {
                    format_float(bounds[i])
                } else {
                    "+Inf".to_string()
                };
                out.push_str(&format!(
                    "{name}_bucket{} {cumulative}\n",
                    render_labels(labels, Some(&le))
                ));
            }
            out.push_str(&format!(
                "{name}_sum{} {}\n",
                render_labels(labels, None),
                format_float(sum)
            ));
            out.push_str(&format!(
                "{name}_count{} {count}\n",
                render_labels(labels, None)
            ));
        }
        out
    }
}

fn format_float(v: f64) -> String {
    // Shortest representation that round-trips; trims the noise log-spaced
    // bounds would otherwise print with.
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") {
        s
    } else {
        format!("{s}.0")
    }
}

fn escape_label(v: &str) -> String {
    v.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn render_labels(labels: &[(String, String)], le: Option<&str>) -> String {
    if labels.is_empty() && le.is_none() {
        return String::new();
    }
    let mut parts: Vec<String> = labels
        .iter()
        .map(|(k, v)| format!("{k}=\"{}\"", escape_label(v)))
        .collect();
    if let Some(le) = le {
        parts.push(format!("le=\"{le}\""));
    }
    format!("{{{}}}", parts.join(","))
}

// ---------------------------------------------------------------------------
// Scrape endpoint
// ---------------------------------------------------------------------------

/// A running `/metrics` HTTP listener. Dropping the handle stops it.
pub struct MetricsServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl MetricsServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/metrics", self.addr)
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept with a throwaway connection.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MetricsServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Serve `registry` at `http://127.0.0.1:<port>/metrics`. Port 0 picks a
/// free port; read the bound address off the returned handle.
pub fn serve_metrics(registry: MetricsRegistry, port: u16) -> std::io::Result<MetricsServer> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let thread = std::thread::Builder::new()
        .name("metrics-http".to_string())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    return;
                }
                let Ok(stream) = conn else { continue };
                let registry = registry.clone();
                // One short-lived thread per scrape: scrapers are rare and a
                // stuck client must not stall the accept loop.
                std::thread::spawn(move || {
                    let _ = serve_one(stream, &registry);
                });
            }
        })?;
    Ok(MetricsServer {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn serve_one(mut stream: TcpStream, registry: &MetricsRegistry) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(2)))?;
    stream.set_write_timeout(Some(Duration::from_secs(2)))?;
    // Read enough of the request to see the request line; tolerate clients
    // that send the full header block.
    let mut buf = [0u8; 2048];
    let mut seen = 0usize;
    let path = loop {
        let n = stream.read(&mut buf[seen..])?;
        seen += n;
        let text = String::from_utf8_lossy(&buf[..seen]);
        if let Some(line) = text.lines().next() {
            if text.contains("\r\n") || n == 0 || seen == buf.len() {
                let mut parts = line.split_whitespace();
                let _method = parts.next().unwrap_or("");
                break parts.next().unwrap_or("/").to_string();
            }
        }
        if n == 0 {
            break "/".to_string();
        }
    };
    let (status, body) = if path == "/metrics" || path.starts_with("/metrics?") {
        ("200 OK", registry.render())
    } else {
        ("404 Not Found", "try /metrics\n".to_string())
    };
    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: text/plain; version=0.0.4; charset=utf-8\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_layout_is_log_spaced_over_the_documented_range() {
        let b = bucket_bounds();
        assert_eq!(b.len(), 31);
        assert!((b[0] - 0.0001).abs() < 1e-12);
        assert!((b[30] - 60.0).abs() < 1e-12);
        for w in b.windows(2) {
            assert!(w[1] > w[0]);
        }
        // Log-spaced: constant ratio between adjacent bounds.
        let r0 = b[1] / b[0];
        for w in b.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-9);
        }
    }

    #[test]
    fn counter_and_gauge_accumulate() {
        let m = MetricsRegistry::new();
        let c = m.counter("tasks_total", &[("stage", "exec")]);
        c.inc();
        c.add(4);
        assert_eq!(c.get(), 5);
        assert_eq!(m.counter("tasks_total", &[("stage", "exec")]).get(), 5);
        let g = m.gauge("depth", &[]);
        g.set(7);
        g.add(-2);
        assert_eq!(g.get(), 5);
    }

    #[test]
    fn histogram_quantiles_walk_the_buckets() {
        let m = MetricsRegistry::new();
        let h = m.histogram("latency_seconds", &[]);
        for _ in 0..50 {
            h.observe(0.001);
        }
        for _ in 0..50 {
            h.observe(0.1);
        }
        assert_eq!(h.count(), 100);
        assert!((h.mean_seconds() - 0.0505).abs() < 1e-9);
        let p50 = h.quantile(0.5);
        assert!((0.001..=0.0016).contains(&p50), "p50 bucket bound: {p50}");
        let p99 = h.quantile(0.99);
        assert!((0.1..=0.16).contains(&p99), "p99 bucket bound: {p99}");
    }

    #[test]
    fn out_of_range_observations_stay_finite() {
        let m = MetricsRegistry::new();
        let h = m.histogram("latency_seconds", &[]);
        h.observe(120.0); // beyond the last bucket
        h.observe(0.00001); // below the first
        assert_eq!(h.count(), 2);
        assert_eq!(h.quantile(1.0), 60.0);
        let empty = m.histogram("other", &[]);
        assert_eq!(empty.quantile(0.5), 0.0);
    }

    #[test]
    fn render_emits_prometheus_text_format() {
        let m = MetricsRegistry::new();
        m.counter("jobs_total", &[("queue", "exec_queue")]).add(3);
        m.gauge("depth", &[("queue", "exec_queue")]).set(11);
        m.histogram("latency_seconds", &[]).observe(0.002);
        let text = m.render();
        assert!(text.contains("# TYPE jobs_total counter"));
        assert!(text.contains("jobs_total{queue=\"exec_queue\"} 3"));
        assert!(text.contains("# TYPE depth gauge"));
        assert!(text.contains("depth{queue=\"exec_queue\"} 11"));
        assert!(text.contains("# TYPE latency_seconds histogram"));
        assert!(text.contains("latency_seconds_bucket{le=\"+Inf\"} 1"));
        assert!(text.contains("latency_seconds_count 1"));
        // Every bucket line is cumulative, so +Inf carries the total.
        let inf = text
            .lines()
            .find(|l| l.contains("le=\"+Inf\""))
            .unwrap();
        assert!(inf.ends_with(" 1"));
    }

    #[test]
    fn label_values_are_escaped() {
        let m = MetricsRegistry::new();
        m.counter("c", &[("k", "a\"b\\c\nd")]).inc();
        let text = m.render();
        assert!(text.contains("c{k=\"a\\\"b\\\\c\\nd\"} 1"));
    }

    #[test]
    fn scrape_endpoint_serves_the_registry() {
        let m = MetricsRegistry::new();
        m.counter("scrapes_total", &[]).inc();
        let server = serve_metrics(m.clone(), 0).unwrap();
        let mut conn = TcpStream::connect(server.addr()).unwrap();
        conn.write_all(b"GET /metrics HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
        let mut body = String::new();
        conn.read_to_string(&mut body).unwrap();
        assert!(body.starts_with("HTTP/1.1 200 OK"));
        assert!(body.contains("version=0.0.4"));
        assert!(body.contains("scrapes_total 1"));

        let mut conn = TcpStream::connect(server.addr()).unwrap();
        conn.write_all(b"GET /other HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
        let mut body = String::new();
        conn.read_to_string(&mut body).unwrap();
        assert!(body.starts_with("HTTP/1.1 404"));
    }
}
