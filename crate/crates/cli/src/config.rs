//! Layered settings: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swarm_emu::device::DeviceConfig;
use swarm_emu::experiment::{ClockKind, RunOptions};
use swarm_emu::workload::WorkloadSpec;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub clock: ClockKind,
    /// OS threads for the agent runtime.
    pub threads: usize,
    pub warmup_fraction: f64,
    pub drain_timeout_s: f64,
    pub out: PathBuf,
    pub run_id: String,
    /// One run per value, overriding `device.timing.t_max_iops`.
    pub sweep_tmax: Vec<f64>,
    /// Also write the per-request lifecycle trace.
    pub trace: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        let d = RunOptions::default();
        Self {
            clock: d.clock,
            threads: d.threads,
            warmup_fraction: d.warmup_fraction,
            drain_timeout_s: d.drain_timeout_s,
            out: PathBuf::from("results"),
            run_id: String::new(),
            sweep_tmax: Vec::new(),
            trace: false,
        }
    }
}

impl RunSection {
    pub fn options(&self, run_id: &str) -> RunOptions {
        RunOptions {
            clock: self.clock,
            threads: self.threads,
            warmup_fraction: self.warmup_fraction,
            drain_timeout_s: self.drain_timeout_s,
            run_id: run_id.to_string(),
            mode: String::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub device: DeviceConfig,
    pub workload: WorkloadSpec,
    pub run: RunSection,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies the TOML text on top of `base`. Keys that do not name a setting
/// are rejected.
pub fn layer_str(base: &Settings, text: &str) -> Result<Settings, toml::de::Error> {
    let over: toml::Value = toml::from_str(text)?;
    let mut v = toml::Value::try_from(base).expect("settings serialize to TOML");
    merge(&mut v, over);
    let mut unknown = Vec::new();
    let s: Settings = serde_ignored::deserialize(v, |p| unknown.push(p.to_string()))?;
    if unknown.is_empty() {
        Ok(s)
    } else {
        Err(serde::de::Error::custom(format!("unknown config keys: {}", unknown.join(", "))))
    }
}

pub fn layer_file(base: &Settings, path: &Path) -> Result<Settings, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    layer_str(base, &text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use swarm_emu::workload::LbaDistribution;

    #[test]
    fn file_overrides_only_what_it_names() {
        let base = Settings::default();
        let s = layer_str(
            &base,
            "[device]\nn_service_units = 8\n[device.timing]\nl_min_us = 80.0\n\
             [workload]\nrate_iops = 1000.0\nlba_distribution = { kind = \"zipf\", theta = 0.9 }\n\
             [run]\nclock = \"virtual\"\nsweep_tmax = [1e5, 2e5]\n",
        )
        .unwrap();
        assert_eq!(s.device.n_service_units, 8);
        assert_eq!(s.device.timing.l_min_us, 80.0);
        assert_eq!(s.device.timing.t_max_iops, base.device.timing.t_max_iops);
        assert_eq!(s.workload.rate_iops, Some(1000.0));
        assert_eq!(s.workload.lba_distribution, LbaDistribution::Zipf { theta: 0.9 });
        assert_eq!(s.run.clock, ClockKind::Virtual);
        assert_eq!(s.run.sweep_tmax, vec![1e5, 2e5]);
        assert_eq!(s.workload.n_submitters, base.workload.n_submitters);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = layer_str(&Settings::default(), "[device]\nn_units = 8\n").unwrap_err();
        assert!(e.to_string().contains("device.n_units"), "{e}");
        assert!(layer_str(&Settings::default(), "[device]\nn_service_units = \"x\"\n").is_err());
    }

    #[test]
    fn empty_file_keeps_the_base() {
        let mut base = Settings::default();
        base.workload.duration_s = 1.5;
        assert_eq!(layer_str(&base, "").unwrap(), base);
    }
}
