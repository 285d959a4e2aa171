use std::path::Path;
use std::process::{Command, Output};

fn swarm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swarm-emu"))
        .args(args)
        .current_dir(dir)
        .env_remove("SWARM_EMU_CONFIG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &["--clock", "virtual", "--units", "2", "--queue-pairs", "4", "--duration", "0.01"];

#[test]
fn bench_warp_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["bench", "warp", "--threads", "256", "--out", "res"];
    args.extend_from_slice(SMALL);
    let o = swarm(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("bench-warp warp"));
    let csv = std::fs::read_to_string(dir.path().join("res/bench-warp.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "run_id,workload,t_max_iops,l_min_us,n_units,mode,iops,target_mean_us,proc_mean_us,e2e_mean_us,\
         e2e_p99_us,doorbell_writes,fetch_transfers,batches_issued"
    );
    assert_eq!(csv.lines().count(), 2);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("res/bench-warp.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["device"]["n_service_units"], 2);
    assert_eq!(json["config"]["workload"]["n_submitters"], 256);
}

#[test]
fn beam_sweep_gives_one_row_per_t_max() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "bench", "beam", "--batch", "8", "--width", "4", "--batches", "1", "--sweep-tmax", "50000,100000,200000,400000",
    ];
    args.extend_from_slice(SMALL);
    let o = swarm(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("results/bench-beam.csv")).unwrap();
    let t_max: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(t_max, ["50000.0", "100000.0", "200000.0", "400000.0"]);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "[device]\nn_service_units = 2\nn_queue_pairs = 4\n[device.timing]\nl_min_us = 80.0\n\
         [workload]\nqdepth = 1\nn_queue_pairs = 1\nduration_s = 0.01\n[run]\nclock = \"virtual\"\nrun_id = \"cfg\"\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_swarm-emu"))
        .args(["bench", "fio", "--lmin-us", "60"])
        .current_dir(dir.path())
        .env("SWARM_EMU_CONFIG", dir.path().join("c.toml"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results/cfg.json")).unwrap()).unwrap();
    assert_eq!(json["l_min_us"], 60.0);
    assert_eq!(json["summary"]["target"]["mean_us"], 60.0);
    assert_eq!(json["config"]["workload"]["qdepth"], 1);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[device]\nn_units = 3\n").unwrap();
    let o = swarm(&["bench", "fio", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("device.n_units"));
    let o = swarm(&["bench", "fio", "--units", "0", "--clock", "virtual"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablation_skew_has_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = swarm(&["ablation", "skew", "--clock", "virtual", "--duration", "0.05"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("results/ablation-skew.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn validate_fault_injection_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ok = swarm(&["validate", "--clock", "virtual", "--only", "2"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let bad = swarm(&["validate", "--clock", "virtual", "--only", "2", "--inject-min-delay-bug"], dir.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(stdout(&bad).contains("[FAIL]  2"));
}

#[test]
fn validate_is_reproducible_on_the_virtual_clock() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["validate", "--clock", "virtual", "--seed", "42", "--only", "2,3,4,9"];
    let a = swarm(&args, dir.path());
    let b = swarm(&args, dir.path());
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
}
