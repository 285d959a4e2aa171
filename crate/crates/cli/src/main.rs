//! `swarm-emu`: run benchmarks, ablations and the validation suite against
//! the emulated SSD.
//!
//! Exit codes: 0 success, 1 config or I/O error, 2 verification failure,
//! 3 tolerance violation.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use swarm_emu::experiment::{ablation_setup, run, run_ablation, AblationKind, ClockKind};
use swarm_emu::metrics::{export, write_trace, Format, RunReport};
use swarm_emu::validate::{exit_code, run_checks, ValidateOptions};
use swarm_emu::workload::WorkloadKind;

use config::{layer_file, Settings};

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFY: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "swarm-emu", version, about = "Real-time virtual NVMe SSD emulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one workload, or one per value of --sweep-tmax.
    Bench(BenchArgs),
    /// Run a fixed configuration matrix.
    Ablation(AblationArgs),
    /// Run the acceptance suite.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchKind {
    Fio,
    Warp,
    Beam,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    Frontend,
    Timing,
    Skew,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClockArg {
    Real,
    Virtual,
}

impl From<ClockArg> for ClockKind {
    fn from(c: ClockArg) -> Self {
        match c {
            ClockArg::Real => ClockKind::Real,
            ClockArg::Virtual => ClockKind::Virtual,
        }
    }
}

/// Flags shared by `bench` and `ablation`. Each maps onto a config key.
#[derive(Args, Debug)]
struct Common {
    /// TOML file with [device], [workload] and [run] sections.
    #[arg(long, env = "SWARM_EMU_CONFIG")]
    config: Option<PathBuf>,
    /// device.timing.t_max_iops
    #[arg(long)]
    tmax_iops: Option<f64>,
    /// device.timing.l_min_us
    #[arg(long)]
    lmin_us: Option<f64>,
    /// device.n_service_units
    #[arg(long)]
    units: Option<u32>,
    /// device.n_queue_pairs and workload.n_queue_pairs
    #[arg(long)]
    queue_pairs: Option<u32>,
    /// workload.n_submitters
    #[arg(long)]
    threads: Option<usize>,
    /// workload.duration_s
    #[arg(long)]
    duration: Option<f64>,
    /// workload.seed
    #[arg(long)]
    seed: Option<u64>,
    /// run.clock
    #[arg(long, value_enum)]
    clock: Option<ClockArg>,
    /// run.out
    #[arg(long)]
    out: Option<PathBuf>,
    /// run.run_id
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(value_enum)]
    kind: BenchKind,
    #[command(flatten)]
    common: Common,
    /// workload.qdepth
    #[arg(long)]
    qdepth: Option<usize>,
    /// workload.io_bytes
    #[arg(long)]
    io_bytes: Option<u32>,
    /// workload.rate_iops
    #[arg(long)]
    rate_iops: Option<f64>,
    /// workload.beam.batch
    #[arg(long)]
    batch: Option<usize>,
    /// workload.beam.width
    #[arg(long)]
    width: Option<usize>,
    /// workload.beam.batches
    #[arg(long)]
    batches: Option<u64>,
    /// run.sweep_tmax
    #[arg(long, value_delimiter = ',')]
    sweep_tmax: Vec<f64>,
    /// workload.verify = false
    #[arg(long)]
    no_verify: bool,
    /// run.trace
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[arg(value_enum)]
    kind: AblationArg,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Drop the timing model's minimum delay (the low-load check must fail).
    #[arg(long)]
    inject_min_delay_bug: bool,
    #[arg(long, value_enum, default_value = "real")]
    clock: ClockArg,
    /// Criteria to run, e.g. 1,2,9 (default: all).
    #[arg(long, value_delimiter = ',')]
    only: Vec<u8>,
    /// Scales time-bounded runs; defaults to 0.01 on the virtual clock.
    #[arg(long)]
    duration_scale: Option<f64>,
    #[arg(long, default_value_t = 1)]
    runtime_threads: usize,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Verify(String),
}

impl Common {
    fn apply(&self, s: &mut Settings) {
        let t = &mut s.device.timing;
        if let Some(v) = self.tmax_iops {
            t.t_max_iops = v;
        }
        if let Some(v) = self.lmin_us {
            t.l_min_us = v;
        }
        if let Some(v) = self.units {
            s.device.n_service_units = v;
        }
        if let Some(v) = self.queue_pairs {
            s.device.n_queue_pairs = v;
            s.workload.n_queue_pairs = v;
        }
        if let Some(v) = self.threads {
            s.workload.n_submitters = v;
        }
        if let Some(v) = self.duration {
            s.workload.duration_s = v;
        }
        if let Some(v) = self.seed {
            s.workload.seed = v;
        }
        if let Some(v) = self.clock {
            s.run.clock = v.into();
        }
        if let Some(v) = &self.out {
            s.run.out = v.clone();
        }
        if let Some(v) = &self.run_id {
            s.run.run_id = v.clone();
        }
    }

    fn settings(&self, base: Settings) -> Result<Settings, Failure> {
        let mut s = match &self.config {
            Some(p) => layer_file(&base, p).map_err(|e| Failure::Config(e.to_string()))?,
            None => base,
        };
        self.apply(&mut s);
        Ok(s)
    }
}

impl BenchArgs {
    fn apply(&self, s: &mut Settings) {
        s.workload.kind = match self.kind {
            BenchKind::Fio => WorkloadKind::QueueParallel,
            BenchKind::Warp => WorkloadKind::WarpCoalesced,
            BenchKind::Beam => WorkloadKind::BeamSearch,
        };
        let w = &mut s.workload;
        if let Some(v) = self.qdepth {
            w.qdepth = v;
        }
        if let Some(v) = self.io_bytes {
            w.io_bytes = v;
        }
        if let Some(v) = self.rate_iops {
            w.rate_iops = Some(v);
        }
        if let Some(v) = self.batch {
            w.beam.batch = v;
        }
        if let Some(v) = self.width {
            w.beam.width = v;
        }
        if let Some(v) = self.batches {
            w.beam.batches = v;
        }
        if self.no_verify {
            w.verify = false;
        }
        if !self.sweep_tmax.is_empty() {
            s.run.sweep_tmax = self.sweep_tmax.clone();
        }
        if self.trace {
            s.run.trace = true;
        }
    }
}

fn summary_line(r: &RunReport) -> String {
    let s = &r.summary;
    let mut line = format!(
        "{} {} [{}] t_max={:.0} iops={:.0} target={:.1}us proc={:.1}us e2e={:.1}us e2e_p99={:.1}us",
        r.run_id, r.workload, r.mode, r.t_max_iops, s.iops, s.target.mean_us, s.proc.mean_us, s.e2e.mean_us, s.e2e.p99_us
    );
    if r.queries > 0 {
        line.push_str(&format!(" qps={:.1} queries={}", r.qps, r.queries));
    }
    line
}

/// Integrity problems that make a run's numbers untrustworthy.
fn verification_problems(r: &RunReport) -> Vec<String> {
    let mut p = Vec::new();
    if r.host.submitted != r.host.completed {
        p.push(format!("submitted {} completed {}", r.host.submitted, r.host.completed));
    }
    if r.host.verify_failures > 0 {
        p.push(format!("{} pattern mismatches", r.host.verify_failures));
    }
    if r.host.cid_violations > 0 {
        p.push(format!("{} CID violations", r.host.cid_violations));
    }
    if r.host.error_status > 0 {
        p.push(format!("{} error completions", r.host.error_status));
    }
    if r.lifecycle.early + r.lifecycle.misordered > 0 {
        p.push(format!("{} early, {} misordered", r.lifecycle.early, r.lifecycle.misordered));
    }
    if r.undrained > 0 {
        p.push(format!("{} undrained", r.undrained));
    }
    p
}

fn write_outputs(reports: &[RunReport], out: &Path, run_id: &str) -> Result<(), Failure> {
    let io = |e: &dyn std::fmt::Display| Failure::Config(format!("writing to {}: {e}", out.display()));
    std::fs::create_dir_all(out).map_err(|e| io(&e))?;
    let csv = out.join(format!("{run_id}.csv"));
    export(reports, &csv, Format::Csv).map_err(|e| io(&e))?;
    let json = out.join(format!("{run_id}.json"));
    let text = if let [one] = reports {
        serde_json::to_string_pretty(one)
    } else {
        serde_json::to_string_pretty(reports)
    }
    .map_err(|e| io(&e))?;
    std::fs::write(&json, text + "\n").map_err(|e| io(&e))?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn check(reports: &[RunReport]) -> Result<(), Failure> {
    let bad: Vec<String> = reports
        .iter()
        .filter_map(|r| {
            let p = verification_problems(r);
            (!p.is_empty()).then(|| format!("{}: {}", r.run_id, p.join(", ")))
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(bad.join("; ")))
    }
}

fn bench(args: &BenchArgs) -> Result<(), Failure> {
    let mut s = args.common.settings(Settings::default())?;
    args.apply(&mut s);
    let run_id = if s.run.run_id.is_empty() {
        format!("bench-{}", s.workload.kind.label())
    } else {
        s.run.run_id.clone()
    };
    let sweep = if s.run.sweep_tmax.is_empty() {
        vec![s.device.timing.t_max_iops]
    } else {
        s.run.sweep_tmax.clone()
    };
    let mut reports = Vec::new();
    for (i, &t_max) in sweep.iter().enumerate() {
        let mut cfg = s.device.clone();
        cfg.timing.t_max_iops = t_max;
        let id = if sweep.len() > 1 { format!("{run_id}-{i}") } else { run_id.clone() };
        let out = run(&cfg, &s.workload, &s.run.options(&id)).map_err(|e| Failure::Config(e.to_string()))?;
        println!("{}", summary_line(&out.report));
        if s.run.trace {
            std::fs::create_dir_all(&s.run.out).map_err(|e| Failure::Config(e.to_string()))?;
            write_trace(&out.records, &s.run.out.join(format!("{id}.trace.csv")))
                .map_err(|e| Failure::Config(e.to_string()))?;
        }
        reports.push(out.report);
    }
    write_outputs(&reports, &s.run.out, &run_id)?;
    check(&reports)
}

fn ablation(args: &AblationArgs) -> Result<(), Failure> {
    let kind = match args.kind {
        AblationArg::Frontend => AblationKind::Frontend,
        AblationArg::Timing => AblationKind::Timing,
        AblationArg::Skew => AblationKind::Skew,
    };
    let (device, workload) = ablation_setup(kind);
    let base = Settings {
        device,
        workload,
        ..Default::default()
    };
    let s = args.common.settings(base)?;
    let run_id = if s.run.run_id.is_empty() {
        format!("ablation-{}", format!("{kind:?}").to_lowercase())
    } else {
        s.run.run_id.clone()
    };
    let reports = run_ablation(kind, &s.device, &s.workload, &s.run.options(&run_id))
        .map_err(|e| Failure::Config(e.to_string()))?;
    for r in &reports {
        println!("{}", summary_line(r));
    }
    write_outputs(&reports, &s.run.out, &run_id)?;
    check(&reports)
}

fn validate(args: &ValidateArgs) -> u8 {
    let clock: ClockKind = args.clock.into();
    let opts = ValidateOptions {
        seed: args.seed,
        inject_min_delay_bug: args.inject_min_delay_bug,
        threads: args.runtime_threads,
        clock,
        duration_scale: args.duration_scale.unwrap_or(match clock {
            ClockKind::Real => 1.0,
            ClockKind::Virtual => 0.01,
        }),
    };
    let results = run_checks(&args.only, &opts, |r| println!("{}", r.line()));
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed", results.len());
    exit_code(&results) as u8
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Bench(a) => bench(a),
        Command::Ablation(a) => ablation(a),
        Command::Validate(a) => return ExitCode::from(validate(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}
