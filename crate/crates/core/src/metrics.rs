//! Aggregation of per-agent timestamps into IOPS and latency breakdowns,
//! and machine-readable export.
//!
//! Target = target - fetch, Proc = posted - fetch (device side);
//! E2E = observed by the submitter - submit, which includes SQ queuing.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Nanos;
use crate::device::{DeviceCounters, RequestRecord, RequestState};
use crate::workload::{HostSample, HostStats};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no completions inside the measurement window")]
    Empty,
    #[error("export failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over nanosecond samples (sorted in place).
    pub fn from_ns(values: &mut [u64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        values.sort_unstable();
        let n = values.len();
        let rank = |p: f64| values[((p * n as f64).ceil() as usize).clamp(1, n) - 1] as f64 / 1e3;
        let sum: u128 = values.iter().map(|&v| v as u128).sum();
        Self {
            count: n as u64,
            mean_us: sum as f64 / n as f64 / 1e3,
            p50_us: rank(0.50),
            p99_us: rank(0.99),
            max_us: values[n - 1] as f64 / 1e3,
        }
    }
}

/// Measurement window on the shared clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Window {
    pub start_ns: Nanos,
    pub end_ns: Nanos,
}

impl Window {
    /// Drops the first `warmup` fraction of `[start, end)`.
    pub fn after_warmup(start: Nanos, end: Nanos, warmup: f64) -> Self {
        let skip = ((end.saturating_sub(start)) as f64 * warmup.clamp(0.0, 1.0)) as Nanos;
        Self {
            start_ns: start + skip,
            end_ns: end,
        }
    }

    pub fn contains(&self, t: Nanos) -> bool {
        t >= self.start_ns && t < self.end_ns
    }

    pub fn seconds(&self) -> f64 {
        self.end_ns.saturating_sub(self.start_ns) as f64 * 1e-9
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub completions: u64,
    pub iops: f64,
    pub target: LatencyStats,
    pub proc: LatencyStats,
    pub e2e: LatencyStats,
}

pub fn summarize(records: &[RequestRecord], samples: &[HostSample], window: Window) -> Result<Summary, MetricsError> {
    let completions = samples.iter().filter(|s| window.contains(s.observed_ns)).count() as u64;
    if completions == 0 || window.seconds() <= 0.0 {
        return Err(MetricsError::Empty);
    }
    let mut target = Vec::new();
    let mut proc = Vec::new();
    for r in records.iter().filter(|r| window.contains(r.posted_ns) && r.target_ns > 0) {
        target.push(r.target_ns - r.fetch_ns);
        proc.push(r.posted_ns - r.fetch_ns);
    }
    let mut e2e: Vec<u64> = samples
        .iter()
        .filter(|s| window.contains(s.observed_ns))
        .map(|s| s.observed_ns - s.submit_ns)
        .collect();
    Ok(Summary {
        completions,
        iops: completions as f64 / window.seconds(),
        target: LatencyStats::from_ns(&mut target),
        proc: LatencyStats::from_ns(&mut proc),
        e2e: LatencyStats::from_ns(&mut e2e),
    })
}

/// Per-record ordering checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleCheck {
    /// Successful completions posted before target - granularity.
    pub early: u64,
    /// Records whose timestamps or state violate the lifecycle order.
    pub misordered: u64,
}

pub fn check_lifecycle(records: &[RequestRecord], granularity: Nanos) -> LifecycleCheck {
    let mut c = LifecycleCheck::default();
    for r in records.iter().filter(|r| r.status == 0) {
        if r.posted_ns + granularity < r.target_ns {
            c.early += 1;
        }
        if r.state != RequestState::Completed || r.copy_done_ns < r.fetch_ns || r.posted_ns < r.copy_done_ns {
            c.misordered += 1;
        }
    }
    c
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub workload: String,
    pub mode: String,
    pub t_max_iops: f64,
    pub l_min_us: f64,
    pub n_units: u32,
    pub window_s: f64,
    pub summary: Summary,
    pub device: DeviceCounters,
    pub host: HostStats,
    pub lifecycle: LifecycleCheck,
    /// Requests left in the device when the run stopped.
    pub undrained: u64,
    /// Sum over dispatchers of fetched / busy time.
    pub ingest_capacity_iops: f64,
    /// Beam search only.
    pub qps: f64,
    pub queries: u64,
    pub config: serde_json::Value,
}

/// The exported column set, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub workload: String,
    pub t_max_iops: f64,
    pub l_min_us: f64,
    pub n_units: u32,
    pub mode: String,
    pub iops: f64,
    pub target_mean_us: f64,
    pub proc_mean_us: f64,
    pub e2e_mean_us: f64,
    pub e2e_p99_us: f64,
    pub doorbell_writes: u64,
    pub fetch_transfers: u64,
    pub batches_issued: u64,
}

impl From<&RunReport> for CsvRow {
    fn from(r: &RunReport) -> Self {
        Self {
            run_id: r.run_id.clone(),
            workload: r.workload.clone(),
            t_max_iops: r.t_max_iops,
            l_min_us: r.l_min_us,
            n_units: r.n_units,
            mode: r.mode.clone(),
            iops: r.summary.iops,
            target_mean_us: r.summary.target.mean_us,
            proc_mean_us: r.summary.proc.mean_us,
            e2e_mean_us: r.summary.e2e.mean_us,
            e2e_p99_us: r.summary.e2e.p99_us,
            doorbell_writes: r.device.doorbell_writes,
            fetch_transfers: r.device.fetch_transfers,
            batches_issued: r.device.batches_issued,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

/// Writes the reports as CSV rows (with header) or as a JSON array of the
/// same fields (a single object for one report).
pub fn export(reports: &[RunReport], path: &Path, format: Format) -> Result<(), MetricsError> {
    let rows: Vec<CsvRow> = reports.iter().map(CsvRow::from).collect();
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for row in &rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Format::Json => {
            let f = std::fs::File::create(path)?;
            if let [one] = rows.as_slice() {
                serde_json::to_writer_pretty(f, one)?;
            } else {
                serde_json::to_writer_pretty(f, &rows)?;
            }
        }
    }
    Ok(())
}

/// Full report, including counters and the effective config.
pub fn write_report_json(report: &RunReport, path: &Path) -> Result<(), MetricsError> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, report)?;
    writeln!(f)?;
    Ok(())
}

/// One CSV line per request record.
pub fn write_trace(records: &[RequestRecord], path: &Path) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
