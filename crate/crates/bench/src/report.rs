use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ckpm_core::control::Saturation;
use ckpm_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::experiment::{ExperimentSpec, ModelKind};

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Git-style digest of named inputs: each is framed as `blob <len>\0<bytes>`
/// under its name, in name order.
pub fn content_hash(inputs: &BTreeMap<String, Vec<u8>>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in inputs {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(bytes);
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Linear-interpolation quantile of ascending `sorted` values. Non-finite
/// values sort last.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            if lo == hi || sorted[lo] == sorted[hi] {
                sorted[lo]
            } else {
                sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
            }
        }
    }
}

/// Ascending copy with NaN mapped to +∞.
pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().map(|&x| if x.is_nan() { f64::INFINITY } else { x }).collect();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let s = sorted(values);
        Self {
            q25: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q75: quantile(&s, 0.75),
        }
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    /// 1-based step; `t = 1` is the encoded start.
    pub t: usize,
    #[serde(flatten)]
    pub error: Quartiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetrics {
    pub episodes: usize,
    pub object_counts: [usize; 2],
    pub sysid_transitions: usize,
    pub curve: Vec<SimRow>,
    /// Episodes whose rollout left the finite range.
    pub non_finite: usize,
}

impl SimulationMetrics {
    pub fn final_median(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |r| r.error.median)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProtocol {
    pub horizon: usize,
    pub mpc_period: usize,
    pub solves_per_trial: usize,
    pub action_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlMetrics {
    pub protocol: ControlProtocol,
    pub errors: Vec<f64>,
    #[serde(flatten)]
    pub summary: Quartiles,
    pub mean: f64,
    pub saturation: Saturation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    /// Median simulation error at the horizon, one per seed.
    pub seeds: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetrics {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub command: String,
    pub mode: ModelKind,
    pub extrapolate: bool,
    pub input_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepMetrics>,
    pub config: ExperimentSpec,
}

impl MetricsReport {
    pub fn new(command: &str, spec: &ExperimentSpec, extrapolate: bool, input_sha256: String) -> Self {
        Self {
            command: command.into(),
            mode: spec.model.mode,
            extrapolate,
            input_sha256,
            train: None,
            simulation: None,
            control: None,
            sweep: None,
            config: spec.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One CSV table per populated section.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(sim) = &self.simulation {
            out.push_str("t,median,q25,q75\n");
            for r in &sim.curve {
                let _ = writeln!(out, "{},{},{},{}", r.t, r.error.median, r.error.q25, r.error.q75);
            }
        }
        if let Some(c) = &self.control {
            out.push_str("trial,control_error\n");
            for (k, e) in c.errors.iter().enumerate() {
                let _ = writeln!(out, "{k},{e}");
            }
        }
        if let Some(s) = &self.sweep {
            let _ = writeln!(out, "axis,value,median,{}", (0..s.rows.first().map_or(0, |r| r.seeds.len())).map(|k| format!("seed{k}")).collect::<Vec<_>>().join(","));
            for r in &s.rows {
                let seeds: Vec<String> = r.seeds.iter().map(f64::to_string).collect();
                let _ = writeln!(out, "{},{},{},{}", s.axis, r.value, r.median, seeds.join(","));
            }
        }
        out
    }
}

/// Wall-clock seconds per stage. Kept beside the report so that the report
/// itself stays byte-reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings(pub BTreeMap<String, f64>);

impl Timings {
    pub fn record(&mut self, stage: &str, started: std::time::Instant) {
        self.0.insert(stage.into(), started.elapsed().as_secs_f64());
    }
}

/// Writes `<stem>.json`, `<stem>.csv` and `<stem>.timings.json` into `dir`.
pub fn write_report(dir: &Path, stem: &str, report: &MetricsReport, timings: &Timings) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, report.to_json()?).map_err(|e| io_err(&json, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, report.to_csv()).map_err(|e| io_err(&csv, e))?;
    let side = dir.join(format!("{stem}.timings.json"));
    fs::write(&side, serde_json::to_string_pretty(timings)? + "\n").map_err(|e| io_err(&side, e))?;
    Ok(json)
}
