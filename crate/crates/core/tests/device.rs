use std::sync::Arc;

use swarm_emu::clock::Clock;
use swarm_emu::device::{Device, DeviceConfig, FetchMode, FetchPathKind, FrontendMode, RequestState};
use swarm_emu::exec::Runtime;
use swarm_emu::experiment::{run, ClockKind, RunOptions};
use swarm_emu::memory::MemoryMap;
use swarm_emu::queue::{status, SubmissionEntry, OPC_READ};
use swarm_emu::store::read_block_oracle;
use swarm_emu::timing::UpdateMode;
use swarm_emu::workload::{WorkloadKind, WorkloadSpec};

fn small_device() -> DeviceConfig {
    DeviceConfig {
        capacity_blocks: 4096,
        n_service_units: 2,
        n_queue_pairs: 4,
        queue_depth: 256,
        ..Default::default()
    }
}

fn virtual_opts() -> RunOptions {
    RunOptions {
        clock: ClockKind::Virtual,
        ..Default::default()
    }
}

fn warp(threads: usize, qps: u32, secs: f64) -> WorkloadSpec {
    WorkloadSpec {
        kind: WorkloadKind::WarpCoalesced,
        n_submitters: threads,
        n_queue_pairs: qps,
        qdepth: 255,
        duration_s: secs,
        ..Default::default()
    }
}

/// Host and device on raw rings, no workload layer.
struct Bench {
    clock: Clock,
    memory: Arc<MemoryMap>,
    device: Device,
    rt: Runtime,
}

fn bench(cfg: &DeviceConfig) -> Bench {
    let clock = Clock::virtual_at(0);
    let memory = MemoryMap::new();
    let (device, agents) = Device::start(cfg, memory.clone(), clock.clone()).unwrap();
    let mut rt = Runtime::new(clock.clone(), 1);
    for a in agents {
        rt.spawn(a);
    }
    Bench {
        clock,
        memory,
        device,
        rt,
    }
}

#[test]
fn reads_return_pattern_and_complete_at_target() {
    let cfg = small_device();
    let mut b = bench(&cfg);
    let qp = b.device.queue_pairs()[1].clone();
    let mut port = qp.host_port().unwrap();
    let buf = b.memory.register(64 * 4096);
    let entries: Vec<_> = (0..64u16)
        .map(|c| SubmissionEntry::read(c, c as u64 * 37, 7, buf.addr(c as u64 * 4096).to_ptr()))
        .collect();
    port.try_submit(&entries).unwrap();
    let mut got = Vec::new();
    while got.len() < 64 {
        b.rt.run_for(10_000);
        port.consume_into(64, &mut got);
    }
    assert!(got.iter().all(|c| c.is_success()));
    for c in 0..64u64 {
        let mut data = vec![0u8; 4096];
        buf.read(c * 4096, &mut data).unwrap();
        let want: Vec<u8> = (0..8)
            .flat_map(|i| read_block_oracle(cfg.pattern_seed, c * 37 + i, 512, cfg.capacity_blocks).unwrap())
            .collect();
        assert_eq!(data, want, "cid {c}");
    }
    let report = b.device.stop();
    assert_eq!(report.records.len(), 64);
    // 64 reads of 8 units over 8 instances: one coalesced fetch, one batch update.
    assert_eq!(report.counters.fetch_transfers, 1);
    assert_eq!(report.counters.timing_acquisitions, 1);
    assert!(report.records.iter().all(|r| r.fetch_ns == report.records[0].fetch_ns));
    for r in &report.records {
        assert_eq!(r.state, RequestState::Completed);
        assert!(r.posted_ns >= r.target_ns && r.posted_ns >= r.copy_done_ns && r.copy_done_ns >= r.fetch_ns);
        assert_eq!(r.unit, 1);
    }
}

#[test]
fn malformed_entries_complete_with_errors() {
    let cfg = small_device();
    let mut b = bench(&cfg);
    let qp = b.device.queue_pairs()[0].clone();
    let mut port = qp.host_port().unwrap();
    let buf = b.memory.register(4096);
    let ok = SubmissionEntry::read(0, 0, 0, buf.addr(0).to_ptr());
    let mut bad_op = SubmissionEntry::read(1, 0, 0, buf.addr(512).to_ptr());
    bad_op.opcode = 0x01;
    let mut bad_ns = ok;
    bad_ns.cid = 2;
    bad_ns.nsid = 9;
    let bad_lba = SubmissionEntry::read(3, cfg.capacity_blocks - 1, 1, buf.addr(0).to_ptr());
    let bad_ptr = SubmissionEntry::read(4, 0, 7, buf.addr(1024).to_ptr());
    port.try_submit(&[ok, bad_op, bad_ns, bad_lba, bad_ptr]).unwrap();
    let mut got = Vec::new();
    while got.len() < 5 {
        b.rt.run_for(10_000);
        port.consume_into(16, &mut got);
    }
    got.sort_by_key(|c| c.cid);
    let codes: Vec<u16> = got.iter().map(|c| c.status_code()).collect();
    assert_eq!(
        codes,
        vec![
            status::SUCCESS,
            status::INVALID_OPCODE,
            status::INVALID_NAMESPACE,
            status::LBA_OUT_OF_RANGE,
            status::DATA_TRANSFER_ERROR
        ]
    );
    assert_eq!(ok.opcode, OPC_READ);
    // Errors bypass the timing model and are posted straight away.
    let first_error_at = b.clock.now();
    assert!(first_error_at > 0);
    let report = b.device.stop();
    assert_eq!(report.counters.error_completions, 4);
    assert_eq!(report.records.len(), 1);
}

#[test]
fn idle_device_changes_nothing() {
    let mut b = bench(&small_device());
    b.rt.run_for(1_000_000);
    let c = b.device.counters();
    assert_eq!((c.fetched, c.fetch_transfers, c.timing_acquisitions), (0, 0, 0));
    assert!(b.device.timing_models()[0].snapshot().avail_ps().iter().all(|&a| a == 0));
}

#[test]
fn warp_run_conserves_and_verifies() {
    let out = run(&small_device(), &warp(512, 4, 0.02), &virtual_opts()).unwrap();
    let r = &out.report;
    assert!(r.host.submitted > 1000);
    assert_eq!(r.host.submitted, r.host.completed);
    assert_eq!(r.host.verify_failures, 0);
    assert_eq!(r.host.cid_violations, 0);
    assert_eq!(r.lifecycle.early + r.lifecycle.misordered, 0);
    assert_eq!(r.undrained, 0);
    assert_eq!(out.records.len() as u64, r.host.completed);
    // One doorbell per warp.
    assert_eq!(r.device.doorbell_writes * 32, r.host.submitted);
    assert!(r.device.fetch_transfers <= r.host.submitted / 32 + 4);
    for rec in &out.records {
        assert_eq!(rec.unit as u32, rec.qid as u32 % 2, "partition exclusivity");
    }
}

#[test]
fn saturated_throughput_matches_t_max_in_virtual_time() {
    let mut cfg = small_device();
    cfg.timing.t_max_iops = 100_000.0;
    let out = run(&cfg, &warp(1024, 4, 0.2), &virtual_opts()).unwrap();
    let iops = out.report.summary.iops;
    assert!((iops - 100_000.0).abs() / 100_000.0 < 0.02, "{iops}");
}

#[test]
fn low_load_target_is_l_min() {
    let spec = WorkloadSpec {
        kind: WorkloadKind::QueueParallel,
        n_queue_pairs: 1,
        qdepth: 1,
        duration_s: 0.01,
        ..Default::default()
    };
    let out = run(&small_device(), &spec, &virtual_opts()).unwrap();
    let s = out.report.summary;
    assert!(s.completions > 50);
    assert_eq!(s.target.mean_us, 50.0);
    assert_eq!(s.target.p99_us, 50.0);
    assert!(s.proc.mean_us >= 50.0 && s.proc.mean_us < 52.0, "{s:?}");
}

#[test]
fn centralized_per_entry_baseline_runs() {
    let mut cfg = small_device();
    cfg.frontend_mode = FrontendMode::Centralized;
    cfg.fetch_mode = FetchMode::PerEntry;
    cfg.fetch_path = FetchPathKind::Direct;
    cfg.timing.update_mode = UpdateMode::PerRequest;
    let out = run(&cfg, &warp(256, 4, 0.01), &virtual_opts()).unwrap();
    let r = &out.report;
    assert_eq!(r.host.submitted, r.host.completed);
    assert_eq!(r.host.verify_failures, 0);
    assert_eq!(r.device.fetch_transfers, r.host.submitted);
    assert_eq!(r.device.timing_acquisitions, r.host.submitted);
    assert!(out.records.iter().all(|rec| rec.unit == 0));
}

#[test]
fn virtual_runs_are_deterministic() {
    let a = run(&small_device(), &warp(256, 4, 0.01), &virtual_opts()).unwrap();
    let b = run(&small_device(), &warp(256, 4, 0.01), &virtual_opts()).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.samples, b.samples);
}

#[test]
fn config_validation() {
    let mut cfg = small_device();
    cfg.n_queue_pairs = 1;
    assert!(cfg.validate().is_err());
    cfg.frontend_mode = FrontendMode::Centralized;
    assert!(cfg.validate().is_ok());
    cfg.copy_num_desc = 64;
    assert!(cfg.validate().is_err());
    let cfg = DeviceConfig {
        workers_per_unit: 0,
        ..small_device()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small_device();
    let text = toml::to_string(&cfg).unwrap();
    let back: DeviceConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: DeviceConfig = toml::from_str("n_service_units = 16\n[timing]\nt_max_iops = 1e5\n").unwrap();
    assert_eq!(partial.n_service_units, 16);
    assert_eq!(partial.timing.l_min_us, 50.0);
}
