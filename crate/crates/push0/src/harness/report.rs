//! Experiment reports: per-run samples, recomputable summaries, verdicts,
//! and `report.json` / `report.csv` emission.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// One measured run (one repetition at one parameter point).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunRecord {
    /// E.g. `"rate=100 rep=2"` or `"D=4"`.
    pub label: String,
    /// Named scalar results for this run (seconds, counts, ratios).
    pub values: BTreeMap<String, f64>,
    /// Raw per-task samples behind the scalars (latencies in seconds),
    /// kept so every summary is recomputable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<f64>,
}

impl RunRecord {
    pub fn new(label: impl Into<String>) -> Self {
        RunRecord {
            label: label.into(),
            ..Default::default()
        }
    }

    pub fn value(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }
}

/// Aggregate view over a report's runs. Only the fields an experiment
/// actually measures are present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Summary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p99: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub efficiency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<u64>,
}

/// One acceptance check inside a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub parameters: BTreeMap<String, String>,
    pub runs: Vec<RunRecord>,
    pub summary: Summary,
    pub verdicts: Vec<Verdict>,
    /// Wall-clock start, metadata only; durations use the monotonic clock.
    pub started_unix_ms: u64,
    pub elapsed_s: f64,
}

impl ExperimentReport {
    pub fn new(experiment: impl Into<String>) -> Self {
        ExperimentReport {
            experiment: experiment.into(),
            parameters: BTreeMap::new(),
            runs: Vec::new(),
            summary: Summary::default(),
            verdicts: Vec::new(),
            started_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            elapsed_s: 0.0,
        }
    }

    pub fn param(mut self, key: &str, value: impl ToString) -> Self {
        self.parameters.insert(key.to_string(), value.to_string());
        self
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.verdicts.push(Verdict {
            check: name.to_string(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    /// One line per verdict: `ok speedup — 4.1x >= 3.0x`.
    pub fn verdict_lines(&self) -> String {
        self.verdicts
            .iter()
            .map(|v| {
                format!(
                    "{} {} — {}",
                    if v.pass { "ok" } else { "FAIL" },
                    v.check,
                    v.detail
                )
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// `p` in [0,1]; nearest-rank on a sorted copy.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(samples: &[f64]) -> f64 {
    percentile(samples, 0.5)
}

/// Write `report.json` (the full array) and `report.csv` (long format:
/// `experiment,run,metric,value`) into `dir`.
pub fn write_reports(dir: &Path, reports: &[ExperimentReport]) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(reports)?;
    std::fs::write(dir.join("report.json"), json)?;

    let mut csv = String::from("experiment,run,metric,value\n");
    for r in reports {
        for run in &r.runs {
            for (k, v) in &run.values {
                csv.push_str(&format!(
                    "{},{},{},{v}\n",
                    csv_field(&r.experiment),
                    csv_field(&run.label),
                    csv_field(k)
                ));
            }
        }
        for v in &r.verdicts {
            csv.push_str(&format!(
                "{},verdict,{},{}\n",
                csv_field(&r.experiment),
                csv_field(&v.check),
                if v.pass { 1 } else { 0 }
            ));
        }
    }
    std::fs::write(dir.join("report.csv"), csv)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_use_nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&xs, 0.5), 50.0);
        assert_eq!(percentile(&xs, 0.99), 99.0);
        assert_eq!(percentile(&xs, 1.0), 100.0);
        assert_eq!(percentile(&[7.0], 0.5), 7.0);
    }

    #[test]
    fn summary_is_recomputable_from_samples() {
        let (mean, std) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert!((mean - 5.0).abs() < 1e-12);
        assert!((std - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reports_round_trip_through_json_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ExperimentReport::new("latency").param("rate", 100);
        r.runs
            .push(RunRecord::new("rate=100 rep=0").value("p50_ms", 2.7));
        r.check("p50", true, "2.7ms <= 25ms");
        write_reports(dir.path(), &[r]).unwrap();

        let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: Vec<ExperimentReport> = serde_json::from_str(&text).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].experiment, "latency");
        assert!(back[0].passed());

        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv.starts_with("experiment,run,metric,value\n"));
        assert!(csv.contains("latency,rate=100 rep=0,p50_ms,2.7"));
        assert!(csv.contains("latency,verdict,p50,1"));
    }
}
