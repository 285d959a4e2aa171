//! Composes a device and a workload into one run, and the fixed ablation
//! matrices built on top of it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Nanos};
use crate::device::{
    Device, DeviceConfig, DeviceError, DispatcherSnapshot, FetchMode, FetchPathKind, FrontendMode, RequestRecord,
};
use crate::exec::Runtime;
use crate::memory::MemoryMap;
use crate::metrics::{check_lifecycle, summarize, MetricsError, RunReport, Summary, Window};
use crate::timing::{ModelScope, UpdateMode};
use crate::workload::{HostSample, LbaDistribution, WorkloadError, WorkloadKind, WorkloadResult, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("verification needs the backend copy enabled")]
    VerifyWithoutCopy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    #[default]
    Real,
    Virtual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub clock: ClockKind,
    /// OS threads for the agent runtime (real clock only).
    pub threads: usize,
    pub warmup_fraction: f64,
    /// Upper bound on the drain phase after submission stops.
    pub drain_timeout_s: f64,
    pub run_id: String,
    /// Label for the `mode` column; derived from the config when empty.
    pub mode: String,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            clock: ClockKind::Real,
            threads: 1,
            warmup_fraction: 0.1,
            drain_timeout_s: 5.0,
            run_id: "run".into(),
            mode: String::new(),
        }
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub records: Vec<RequestRecord>,
    pub samples: Vec<HostSample>,
    pub dispatchers: Vec<DispatcherSnapshot>,
    pub workload: WorkloadResult,
}

pub fn mode_label(cfg: &DeviceConfig) -> String {
    let f = |s: &str| s.to_string();
    [
        match cfg.frontend_mode {
            FrontendMode::Distributed => f("distributed"),
            FrontendMode::Centralized => f("centralized"),
        },
        match cfg.fetch_mode {
            FetchMode::Coalesced => f("coalesced"),
            FetchMode::PerEntry => f("per_entry"),
        },
        match cfg.fetch_path {
            FetchPathKind::Engine => f("engine"),
            FetchPathKind::Direct => f("direct"),
        },
        match cfg.timing.update_mode {
            UpdateMode::Aggregated => f("aggregated"),
            UpdateMode::PerRequest => f("per_request"),
        },
        match cfg.timing.scope {
            ModelScope::Global => f("global"),
            ModelScope::Local => f("local"),
        },
    ]
    .join("+")
}

/// Runs `spec` against a fresh device until the duration elapses or the
/// workload finishes, drains outstanding requests and summarizes.
pub fn run(cfg: &DeviceConfig, spec: &WorkloadSpec, opts: &RunOptions) -> Result<RunOutcome, ExperimentError> {
    if spec.verify && !cfg.backend_copy {
        return Err(ExperimentError::VerifyWithoutCopy);
    }
    let clock = match opts.clock {
        ClockKind::Real => Clock::real(),
        ClockKind::Virtual => Clock::virtual_at(0),
    };
    let memory = MemoryMap::new();
    let (device, device_agents) = Device::start(cfg, memory.clone(), clock.clone())?;
    let (workload, workload_agents) = spec.build(&device, &memory, &clock)?;
    let mut rt = Runtime::new(clock.clone(), opts.threads);
    for a in workload_agents.into_iter().chain(device_agents) {
        rt.spawn(a);
    }
    let start = clock.now();
    let end = workload.end_ns();
    let wl = Arc::new(workload);
    {
        let wl = wl.clone();
        rt.run_until(&move |now| now >= end || wl.done());
    }
    let stop = clock.now().min(end);
    let drain_end = clock.now() + (opts.drain_timeout_s * 1e9) as Nanos;
    {
        let wl = wl.clone();
        rt.run_until(&move |now| wl.outstanding() == 0 || now >= drain_end);
    }
    drop(rt);
    let workload = Arc::try_unwrap(wl).ok().expect("runtime released the workload");
    let result = workload.finish();
    let dev = device.stop();

    let window = Window::after_warmup(start, stop, opts.warmup_fraction);
    let summary = match summarize(&dev.records, &result.samples, window) {
        Ok(s) => s,
        Err(MetricsError::Empty) => Summary::default(),
        Err(e) => return Err(e.into()),
    };
    let ingest: f64 = dev.dispatchers.iter().map(DispatcherSnapshot::capacity).sum();
    let report = RunReport {
        run_id: opts.run_id.clone(),
        workload: spec.kind.label().to_string(),
        mode: if opts.mode.is_empty() { mode_label(cfg) } else { opts.mode.clone() },
        t_max_iops: cfg.timing.t_max_iops,
        l_min_us: cfg.timing.l_min_us,
        n_units: cfg.n_service_units,
        window_s: window.seconds(),
        summary,
        device: dev.counters,
        host: result.stats,
        lifecycle: check_lifecycle(&dev.records, clock.granularity()),
        undrained: dev.in_flight.max(wl_outstanding(&result)),
        ingest_capacity_iops: ingest,
        qps: result.qps(),
        queries: result.queries,
        config: serde_json::json!({ "device": cfg, "workload": spec, "run": opts }),
    };
    Ok(RunOutcome {
        report,
        records: dev.records,
        samples: result.samples.clone(),
        dispatchers: dev.dispatchers,
        workload: result,
    })
}

fn wl_outstanding(r: &WorkloadResult) -> u64 {
    r.stats.submitted.saturating_sub(r.stats.completed)
}

/// Upper bound on IOPS if every dispatcher had its own core while the
/// timing-model guard stays serialized.
pub fn parallel_bound_iops(report: &RunReport) -> f64 {
    let guard_s = report.device.guard_busy_ns as f64 * 1e-9;
    let guard_bound = if guard_s > 0.0 {
        report.device.fetched as f64 / guard_s
    } else {
        f64::INFINITY
    };
    report.ingest_capacity_iops.min(guard_bound)
}

/// Frontend configurations: Base, D, D+A, D+C, D+A+C.
pub fn frontend_matrix(base: &DeviceConfig) -> Vec<(String, DeviceConfig)> {
    let mk = |name: &str, frontend, path, fetch| {
        let mut c = base.clone();
        c.frontend_mode = frontend;
        c.fetch_path = path;
        c.fetch_mode = fetch;
        (name.to_string(), c)
    };
    use FetchMode::*;
    use FetchPathKind::*;
    use FrontendMode::*;
    vec![
        mk("Base", Centralized, Direct, PerEntry),
        mk("D", Distributed, Direct, PerEntry),
        mk("D+A", Distributed, Engine, PerEntry),
        mk("D+C", Distributed, Direct, Coalesced),
        mk("D+A+C", Distributed, Engine, Coalesced),
    ]
}

/// Update mode x unit count.
pub fn timing_matrix(base: &DeviceConfig, units: &[u32]) -> Vec<(String, DeviceConfig)> {
    let mut out = Vec::new();
    for mode in [UpdateMode::Aggregated, UpdateMode::PerRequest] {
        for &u in units {
            let mut c = base.clone();
            c.timing.update_mode = mode;
            c.n_service_units = u;
            c.n_queue_pairs = c.n_queue_pairs.max(u);
            let m = match mode {
                UpdateMode::Aggregated => "aggregated",
                UpdateMode::PerRequest => "per_request",
            };
            out.push((format!("{m}-{u}u"), c));
        }
    }
    out
}

/// Global vs local timing scope.
pub fn skew_matrix(base: &DeviceConfig) -> Vec<(String, DeviceConfig)> {
    [ModelScope::Global, ModelScope::Local]
        .into_iter()
        .map(|scope| {
            let mut c = base.clone();
            c.timing.scope = scope;
            let name = match scope {
                ModelScope::Global => "global",
                ModelScope::Local => "local",
            };
            (name.to_string(), c)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Frontend,
    Timing,
    Skew,
}

/// Default device/workload pair for an ablation, scaled to a desk machine.
pub fn ablation_setup(kind: AblationKind) -> (DeviceConfig, WorkloadSpec) {
    let mut cfg = DeviceConfig::default();
    let mut spec = WorkloadSpec::default();
    match kind {
        AblationKind::Frontend => {
            // Ingestion only: the timing model and copy path stay out of the way.
            cfg.backend_copy = false;
            cfg.n_queue_pairs = 32;
            cfg.timing.t_max_iops = 1e9;
            cfg.timing.l_min_us = 1.0;
            cfg.timing.n_instances = 64;
            cfg.engine.synthetic_per_copy_cost_ns = 300;
            spec.verify = false;
            spec.n_queue_pairs = 32;
            spec.n_submitters = 32 * 256;
            spec.duration_s = 2.0;
        }
        AblationKind::Timing => {
            cfg.backend_copy = false;
            cfg.timing.t_max_iops = 1e9;
            cfg.timing.l_min_us = 1.0;
            cfg.timing.n_instances = 64;
            cfg.timing.guard_hold_ns = 2_000;
            cfg.n_queue_pairs = 64;
            spec.verify = false;
            spec.n_submitters = 64 * 128;
            spec.duration_s = 1.5;
        }
        AblationKind::Skew => {
            cfg.n_service_units = 16;
            cfg.n_queue_pairs = 64;
            cfg.timing.t_max_iops = 50_000.0;
            cfg.timing.l_min_us = 50.0;
            cfg.timing.n_instances = 2;
            spec.lba_distribution = LbaDistribution::SkewToSubset { active_units: 1 };
            spec.n_submitters = 64 * 64;
            spec.duration_s = 3.0;
        }
    }
    spec.kind = WorkloadKind::WarpCoalesced;
    (cfg, spec)
}

pub fn ablation_matrix(kind: AblationKind, base: &DeviceConfig) -> Vec<(String, DeviceConfig)> {
    match kind {
        AblationKind::Frontend => frontend_matrix(base),
        AblationKind::Timing => timing_matrix(base, &[4, 8, 16]),
        AblationKind::Skew => skew_matrix(base),
    }
}

pub fn run_ablation(
    kind: AblationKind,
    base: &DeviceConfig,
    spec: &WorkloadSpec,
    opts: &RunOptions,
) -> Result<Vec<RunReport>, ExperimentError> {
    ablation_matrix(kind, base)
        .into_iter()
        .map(|(name, cfg)| {
            let o = RunOptions {
                run_id: format!("{}-{name}", opts.run_id),
                mode: name,
                ..opts.clone()
            };
            run(&cfg, spec, &o).map(|r| r.report)
        })
        .collect()
}
