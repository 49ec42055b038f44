//! On-disk artifacts: `results.csv`, `manifest.json`, `report.json`, and a
//! gnuplot data file. Numbers are written in Rust's shortest round-trip
//! form, so identical results give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, ExperimentError};
use crate::models::config::ModelConfig;
use crate::stats::Estimate;

pub const RESULTS_HEADER: &str = "param,stat,ci_low,ci_high,n_replicas";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub param: f64,
    pub stat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_replicas: usize,
}

impl Record {
    pub fn from_estimate(param: f64, e: &Estimate) -> Self {
        Self {
            param,
            stat: e.mean,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            n_replicas: e.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub model_hash: Option<String>,
    pub library_version: String,
    pub seed: Option<u64>,
    pub wall_time_s: f64,
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// SHA-256 of the model section's canonical JSON form.
pub fn model_hash(model: &ModelConfig) -> String {
    let json = serde_json::to_string(model).expect("model config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_results_csv(path: &Path, records: &[Record]) -> Result<(), ExperimentError> {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.param, r.stat, r.ci_low, r.ci_high, r.n_replicas);
    }
    write_text(path, &s)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<Record>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parse_err = |line: usize, msg: String| ExperimentError::Parse {
        path: format!("{}:{line}", path.display()),
        msg,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        other => return Err(parse_err(1, format!("expected header {RESULTS_HEADER:?}, got {other:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(parse_err(i + 2, format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(i + 2, e.to_string()));
            Ok(Record {
                param: num(f[0])?,
                stat: num(f[1])?,
                ci_low: num(f[2])?,
                ci_high: num(f[3])?,
                n_replicas: f[4].parse().map_err(|e: std::num::ParseIntError| parse_err(i + 2, e.to_string()))?,
            })
        })
        .collect()
}

/// Gap series as `t,gap_mean,gap_ci_low,gap_ci_high`.
pub fn write_gap_csv(path: &Path, series: &[(f64, Estimate)]) -> Result<(), ExperimentError> {
    let mut s = String::from("t,gap_mean,gap_ci_low,gap_ci_high\n");
    for (t, e) in series {
        let _ = writeln!(s, "{t},{},{},{}", e.mean, e.ci_low, e.ci_high);
    }
    write_text(path, &s)
}

/// Whitespace-separated columns with a `#` header line.
pub fn write_gnuplot(path: &Path, records: &[Record]) -> Result<(), ExperimentError> {
    let mut s = String::from("# param stat ci_low ci_high n_replicas\n");
    for r in records {
        let _ = writeln!(s, "{} {} {} {} {}", r.param, r.stat, r.ci_low, r.ci_high, r.n_replicas);
    }
    write_text(path, &s)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}
