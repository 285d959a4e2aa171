//! Acceptance criteria 1-10, one line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria;
//! `ACCEPTANCE_VIRTUAL=1` runs everything on the virtual clock.

use swarm_emu::experiment::ClockKind;
use swarm_emu::validate::{exit_code, run_checks, ValidateOptions};

fn main() {
    let ids: Vec<u8> = std::env::var("ACCEPTANCE_ONLY")
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let opts = ValidateOptions {
        clock: if std::env::var("ACCEPTANCE_VIRTUAL").is_ok() { ClockKind::Virtual } else { ClockKind::Real },
        duration_scale: std::env::var("ACCEPTANCE_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0),
        ..Default::default()
    };
    let results = run_checks(&ids, &opts, |r| println!("{}", r.line()));
    let passed = results.iter().filter(|r| r.passed).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let code = exit_code(&results);
    if code != 0 {
        std::process::exit(code);
    }
}
