use swarm_emu::device::{DeviceConfig, FetchMode, FetchPathKind, FrontendMode};
use swarm_emu::experiment::{
    ablation_matrix, ablation_setup, mode_label, run, run_ablation, AblationKind, ClockKind,
    ExperimentError, RunOptions,
};
use swarm_emu::timing::ModelScope;
use swarm_emu::workload::WorkloadSpec;

#[test]
fn matrices_have_the_expected_rows() {
    let base = DeviceConfig::default();
    let f = ablation_matrix(AblationKind::Frontend, &base);
    let names: Vec<&str> = f.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["Base", "D", "D+A", "D+C", "D+A+C"]);
    assert_eq!(f[0].1.frontend_mode, FrontendMode::Centralized);
    assert_eq!(f[0].1.fetch_mode, FetchMode::PerEntry);
    assert_eq!(f[4].1.fetch_path, FetchPathKind::Engine);
    assert_eq!(ablation_matrix(AblationKind::Timing, &base).len(), 6);
    let s = ablation_matrix(AblationKind::Skew, &base);
    assert_eq!(s.len(), 2);
    assert_eq!(s[1].1.timing.scope, ModelScope::Local);
}

#[test]
fn mode_label_names_every_axis() {
    let l = mode_label(&DeviceConfig::default());
    assert_eq!(l, "distributed+coalesced+engine+aggregated+global");
}

#[test]
fn verify_requires_the_copy() {
    let cfg = DeviceConfig {
        backend_copy: false,
        ..Default::default()
    };
    let r = run(&cfg, &WorkloadSpec::default(), &RunOptions::default());
    assert!(matches!(r, Err(ExperimentError::VerifyWithoutCopy)));
}

#[test]
fn skew_ablation_global_beats_local() {
    let (cfg, mut spec) = ablation_setup(AblationKind::Skew);
    spec.duration_s = 0.05;
    let opts = RunOptions {
        clock: ClockKind::Virtual,
        run_id: "skew".into(),
        ..Default::default()
    };
    let rows = run_ablation(AblationKind::Skew, &cfg, &spec, &opts).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].run_id, "skew-global");
    assert!(rows[0].summary.iops > 2.0 * rows[1].summary.iops);
    assert_eq!(rows[0].config["device"]["timing"]["scope"], "global", "{}", rows[0].config);
}
