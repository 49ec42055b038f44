//! Scripted experiments: N-scaling scans, long-time contraction scans, LLN
//! checks, exact Gaussian chaos curves, and their on-disk artifacts.
//!
//! Everything here runs in `f64`. Randomness is keyed by the scan seed:
//! replica `r` uses `NoisePlan::new(seed).derive(r)` for every `N`, so
//! particle `i` of replica `r` sees the same initial draw and Brownian path
//! at every grid point of `N` (common random numbers across the N grid).

mod config;
mod persist;
mod scans;

pub use config::{
    ExperimentConfig, FrozenLawConfig, InitLaw, InitialCoupling, LlnConfig, LlnFamily, OracleConfig, ScanConfig,
    SimulateConfig, SimulateMode, Statistic, SCHEMA_VERSION,
};
pub use persist::{
    model_hash, read_results_csv, write_gap_csv, write_gnuplot, write_json, write_results_csv, Manifest, Record,
    RESULTS_HEADER,
};
pub use scans::{
    coupled_series, lln_scan, longtime_scan, oracle_scan, rate_scan_n, run_simulation, validate_model, DtCheck,
    LlnResult, LlnRow, NScanResult, NScanRow, OracleCurve, OracleResult, SeriesPoint, SimulationResult,
    TScanResult, TScanSeries, ThresholdReport, ValidationReport, Verdict,
};

use thiserror::Error;

/// Version recorded in run manifests.
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

use crate::dynamics::DynamicsError;
use crate::metrics::MetricsError;
use crate::models::ModelError;
use crate::oracle::OracleError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("N = {n}, replica {replica}: {source}")]
    Replica {
        n: usize,
        replica: usize,
        #[source]
        source: DynamicsError,
    },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
}

impl ExperimentError {
    /// Runtime failures (blow-up, I/O) as opposed to bad input.
    pub fn is_runtime(&self) -> bool {
        matches!(self, Self::Replica { .. } | Self::Dynamics(DynamicsError::BlowUp { .. }) | Self::Io { .. })
    }
}
