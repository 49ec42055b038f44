//! The single-file experiment config: a model section plus whichever
//! command sections a run needs. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::models::config::ModelConfig;
use crate::models::spot::SpotCheckConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub model: Option<ModelConfig>,
    pub spot_check: Option<SpotCheckConfig>,
    pub scan: Option<ScanConfig>,
    pub simulate: Option<SimulateConfig>,
    pub lln: Option<LlnConfig>,
    pub oracle: Option<OracleConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse {
            path: "<config>".into(),
            msg: e.to_string(),
        })?;
        cfg.check_schema()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` embedded in a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let parse_err = |msg: String| ExperimentError::Parse {
            path: path.display().to_string(),
            msg,
        };
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            let manifest: super::Manifest = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
            manifest.config
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        cfg.check_schema()?;
        Ok(cfg)
    }

    fn check_schema(&self) -> Result<(), ExperimentError> {
        if self.schema != SCHEMA_VERSION {
            return Err(ExperimentError::Config(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<&ModelConfig, ExperimentError> {
        self.model
            .as_ref()
            .ok_or_else(|| ExperimentError::Config("missing [model] section".into()))
    }

    pub fn scan(&self) -> Result<&ScanConfig, ExperimentError> {
        self.scan
            .as_ref()
            .ok_or_else(|| ExperimentError::Config("missing [scan] section".into()))
    }

    /// Replaces every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(s) = self.scan.as_mut() {
            s.seed = seed;
        }
        if let Some(s) = self.simulate.as_mut() {
            s.seed = seed;
        }
        if let Some(s) = self.lln.as_mut() {
            s.seed = seed;
        }
    }
}

/// Per-coordinate independent Gaussian initial law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitLaw {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCoupling {
    /// `X_0^{i,N} = X_0^i`.
    Matched {},
    /// Limit copies start from independent draws of the same law.
    Independent {},
    /// `X_0^i = X_0^{i,N} + offset`.
    Offset { offset: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrozenLawConfig {
    /// Separate interacting run of `m_ref` particles with independent noise;
    /// `m_ref` defaults to ten times the largest N.
    ReferenceEnsemble { m_ref: Option<usize> },
    /// Exact mean path of the limit law; needs kernels affine in the measure.
    GaussianOracle {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// `(1/k) Σ_{i≤k} sup_{s≤t} |X^{i,N}_s − X^i_s|²`.
    SupGap,
    /// `(1/k) Σ_{i≤k} |X^{i,N}_t − X^i_t|²`.
    Gap,
    /// `(1/k) Σ_{i≤k} ‖X^{i,N}_t − X^i_t‖∞²` on path segments.
    SegmentGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub n_grid: Vec<usize>,
    /// Tracked particles per run; all `N` when omitted.
    pub k: Option<usize>,
    pub t_end: f64,
    /// Extra times at which the statistic is reported (`t_end` is always included).
    #[serde(default)]
    pub record_times: Vec<f64>,
    /// Regular record grid for time scans and gap series.
    pub record_every: Option<f64>,
    /// Time at which the N-scaling fit is taken; defaults to `t_end`.
    pub fit_time: Option<f64>,
    pub replicas: usize,
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    pub frozen_law: FrozenLawConfig,
    pub initial_coupling: InitialCoupling,
    pub init: InitLaw,
    pub statistic: Option<Statistic>,
    /// Repeat the smallest N at `dt / 2` and report the difference.
    #[serde(default)]
    pub dt_check: bool,
}

impl ScanConfig {
    pub(crate) fn check(&self, state_dim: usize) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return bad("n_grid must be nonempty and positive".into());
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("n_grid must be strictly increasing, got {:?}", self.n_grid));
        }
        if self.replicas < 2 {
            return bad(format!("need at least 2 replicas for a confidence interval, got {}", self.replicas));
        }
        if let Some(k) = self.k {
            if k == 0 || k > self.n_grid[0] {
                return bad(format!("k = {k} must lie in 1..={}", self.n_grid[0]));
            }
        }
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return bad("dt and t_end must be positive".into());
        }
        if self.init.mean.len() != state_dim || self.init.std.len() != state_dim {
            return bad(format!("init mean and std must have length {state_dim}"));
        }
        if self.init.std.iter().any(|s| !(*s >= 0.0)) {
            return bad("init std must be nonnegative".into());
        }
        if let InitialCoupling::Offset { offset } = &self.initial_coupling {
            if offset.len() != state_dim {
                return bad(format!("offset must have length {state_dim}"));
            }
        }
        if let Some(e) = self.record_every {
            if !(e > 0.0) {
                return bad("record_every must be positive".into());
            }
        }
        if let FrozenLawConfig::ReferenceEnsemble { m_ref: Some(0) } = self.frozen_law {
            return bad("m_ref must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn k_for(&self, n: usize) -> usize {
        self.k.unwrap_or(n).min(n)
    }

    pub(crate) fn m_ref(&self) -> Option<usize> {
        match self.frozen_law {
            FrozenLawConfig::ReferenceEnsemble { m_ref } => {
                Some(m_ref.unwrap_or(10 * self.n_grid.last().copied().unwrap_or(1)))
            }
            FrozenLawConfig::GaussianOracle {} => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMode {
    Interacting,
    Limit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub t_end: f64,
    pub dt: f64,
    pub record_every: f64,
    #[serde(default)]
    pub seed: u64,
    pub init: InitLaw,
    pub mode: SimulateMode,
    /// Needed in `limit` mode.
    pub frozen_law: Option<FrozenLawConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum LlnFamily {
    /// `h(v, ṽ) = ṽ`, `Z ~ Bernoulli(1/2)`: `E|gap|² = 1/(4N)`.
    Bernoulli {},
    /// `h ≡ value`.
    Constant { value: f64 },
    /// `h(v, ṽ) = v ṽ`, `Z ~ N(0, 1)`.
    ProductGaussian {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlnConfig {
    pub h: LlnFamily,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Linear model for exact chaos curves. Omitted matrices and offsets are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub a0: Vec<Vec<f64>>,
    pub b1: Option<Vec<Vec<f64>>>,
    pub b2: Option<Vec<Vec<f64>>>,
    pub c0: Option<Vec<f64>>,
    pub c1: Option<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub m0: Vec<f64>,
    pub s0: Vec<Vec<f64>>,
    pub t: f64,
    pub k: Vec<usize>,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_dt_ode")]
    pub dt_ode: f64,
}

fn default_dt_ode() -> f64 {
    1e-3
}
