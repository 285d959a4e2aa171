//! Browser demo: three sweeps over the emulator, all on the virtual clock so
//! they are deterministic and independent of the page's CPU budget.
//!
//! Each export returns a JSON array of points for the page to plot.

use serde::Serialize;
use swarm_emu::clock::Clock;
use swarm_emu::device::DeviceConfig;
use swarm_emu::experiment::{run, ClockKind, RunOptions};
use swarm_emu::validate::{beam_setup, offload_throughput};
use swarm_emu::workload::{WorkloadKind, WorkloadSpec};
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoadPoint {
    pub offered_iops: f64,
    pub iops: f64,
    pub target_mean_us: f64,
    pub proc_mean_us: f64,
    pub e2e_mean_us: f64,
    pub e2e_p99_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CopyPoint {
    pub batch_size: usize,
    pub num_desc: usize,
    pub copies_per_s: f64,
    pub issue_ns_per_copy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeamPoint {
    pub t_max_iops: f64,
    pub batch: usize,
    pub qps: f64,
    pub iops: f64,
}

pub const LOAD_FRACTIONS: [f64; 8] = [0.1, 0.25, 0.5, 0.75, 0.9, 1.0, 1.25, 1.5];
pub const BEAM_TMAX: [f64; 4] = [50_000.0, 100_000.0, 200_000.0, 400_000.0];

fn virt() -> RunOptions {
    RunOptions {
        clock: ClockKind::Virtual,
        ..Default::default()
    }
}

/// Open-loop random reads at fractions of `t_max`: latency against offered load.
pub fn latency_curve(t_max_iops: f64, l_min_us: f64, n_instances: u32) -> Result<Vec<LoadPoint>, String> {
    let mut cfg = DeviceConfig {
        capacity_blocks: 1 << 14,
        n_queue_pairs: 16,
        queue_depth: 256,
        ..Default::default()
    };
    cfg.timing.t_max_iops = t_max_iops;
    cfg.timing.l_min_us = l_min_us;
    cfg.timing.n_instances = n_instances;
    LOAD_FRACTIONS
        .iter()
        .map(|f| {
            let offered = f * t_max_iops;
            let spec = WorkloadSpec {
                kind: WorkloadKind::QueueParallel,
                n_queue_pairs: 16,
                qdepth: 255,
                rate_iops: Some(offered),
                duration_s: (4_000.0 / offered.min(t_max_iops)).max(20.0 * l_min_us * 1e-6),
                ..Default::default()
            };
            let s = run(&cfg, &spec, &virt()).map_err(|e| e.to_string())?.report.summary;
            Ok(LoadPoint {
                offered_iops: offered,
                iops: s.iops,
                target_mean_us: s.target.mean_us,
                proc_mean_us: s.proc.mean_us,
                e2e_mean_us: s.e2e.mean_us,
                e2e_p99_us: s.e2e.p99_us,
            })
        })
        .collect()
}

/// Copy-engine throughput over batch size and descriptor budget.
pub fn copy_sweep(issue_ns: u64, per_copy_ns: u64) -> Vec<CopyPoint> {
    let mut out = Vec::new();
    for batch_size in [1, 4, 16] {
        for num_desc in [1, 2, 4, 8, 16, 32] {
            let r = offload_throughput(Clock::virtual_at(0), batch_size, num_desc, issue_ns, per_copy_ns, 2_048);
            out.push(CopyPoint {
                batch_size,
                num_desc,
                copies_per_s: r.copies_per_s,
                issue_ns_per_copy: r.issue_ns_per_copy,
            });
        }
    }
    out
}

/// Beam-search queries per second across device IOPS limits.
pub fn beam_curve(batch: usize, width: usize) -> Result<Vec<BeamPoint>, String> {
    BEAM_TMAX
        .iter()
        .map(|&t_max| {
            let batches = (512 / batch.max(1)).clamp(1, 8) as u64;
            let (cfg, spec) = beam_setup(t_max, batch, width, batches);
            let out = run(&cfg, &spec, &virt()).map_err(|e| e.to_string())?;
            let span_s = out.workload.query_span_ns as f64 * 1e-9;
            Ok(BeamPoint {
                t_max_iops: t_max,
                batch,
                qps: out.report.qps,
                iops: if span_s > 0.0 { out.report.host.completed as f64 / span_s } else { 0.0 },
            })
        })
        .collect()
}

fn to_js<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = latencyCurve)]
pub fn latency_curve_js(t_max_iops: f64, l_min_us: f64, n_instances: u32) -> Result<String, JsError> {
    to_js(&latency_curve(t_max_iops, l_min_us, n_instances).map_err(|e| JsError::new(&e))?)
}

#[wasm_bindgen(js_name = copySweep)]
pub fn copy_sweep_js(issue_ns: u32, per_copy_ns: u32) -> Result<String, JsError> {
    to_js(&copy_sweep(issue_ns as u64, per_copy_ns as u64))
}

#[wasm_bindgen(js_name = beamCurve)]
pub fn beam_curve_js(batch: u32, width: u32) -> Result<String, JsError> {
    to_js(&beam_curve(batch as usize, width as usize).map_err(|e| JsError::new(&e))?)
}
