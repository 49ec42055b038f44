//! Declarative model sections of the TOML experiment config.
//!
//! Built-in kernel families are selected by `family = "<name>"`; custom
//! kernels are only available through the library API.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::{
    DelayModel, DiffusionKernelSpec, DriftSpec, HamiltonianModel, MeanFieldModel, ModelError, PairDiffusion,
    PairDrift, Regime, SegmentDiffusion, SegmentDrift, SelfDrift,
};

type Rows = Vec<Vec<f64>>;

fn matrix<T: Scalar>(name: &str, rows: &Rows) -> Result<Matrix<T>, ModelError> {
    let m = Matrix::from_rows(rows).map_err(|e| ModelError::InvalidArgument(format!("{name}: {e}")))?;
    Ok(Matrix::from_f64(&m))
}

fn vector<T: Scalar>(v: &Option<Vec<f64>>, len: usize) -> Vec<T> {
    match v {
        Some(v) => v.iter().map(|&x| T::lit(x)).collect(),
        None => vec![T::zero(); len],
    }
}

/// `b⁽⁰⁾` or the delay/kinetic self drift `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelfDriftConfig {
    /// `A x + c`.
    Linear { a: Rows, c: Option<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairDriftConfig {
    Zero,
    /// `B₁ x + B₂ y + c`.
    Linear {
        on_x: Rows,
        on_y: Rows,
        c: Option<Vec<f64>>,
    },
    /// `scale · tanh(y − x)`, the force of the attractive potential
    /// `scale · log cosh(x − y)` (quadratic near the diagonal).
    AttractiveQuadraticTanh { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairDiffusionConfig {
    ConstantSigma { matrix: Rows },
    /// `diag(base + scale · tanh(x + y))`.
    KernelSigma { base: f64, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmentDriftConfig {
    Zero,
    /// `P ξ(0) + Q ξ(−r0) + R η(0) + S η(−r0) + c`; omitted matrices are zero.
    LinearSegment {
        self_now: Option<Rows>,
        self_lag: Option<Rows>,
        other_now: Option<Rows>,
        other_lag: Option<Rows>,
        c: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmentDiffusionConfig {
    ConstantSigma { matrix: Rows },
    /// `diag(base + scale · tanh(ξ(0)))`.
    HeadTanhSigma { base: f64, scale: f64 },
}

fn zero() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    MeanField {
        d: usize,
        /// Noise dimension; defaults to `d`.
        n: Option<usize>,
        regime: Regime,
        b0: SelfDriftConfig,
        b1: PairDriftConfig,
        sigma: PairDiffusionConfig,
        k_b: f64,
        #[serde(default = "zero")]
        k1: f64,
        #[serde(default = "zero")]
        k2: f64,
        k_sigma: f64,
        delta: Option<f64>,
    },
    Delay {
        d: usize,
        n: Option<usize>,
        r0: f64,
        b: SelfDriftConfig,
        k_b: f64,
        b_tilde: SegmentDriftConfig,
        k_b_tilde: f64,
        sigma: SegmentDiffusionConfig,
        k_sigma: f64,
    },
    Hamiltonian {
        a: Rows,
        k_a: f64,
        coupling: Rows,
        b: SelfDriftConfig,
        k1: f64,
        k2: f64,
        b_tilde: SegmentDriftConfig,
        k_b_tilde: f64,
        sigma: Rows,
        #[serde(default = "zero")]
        r0: f64,
    },
}

/// A model built from its config section.
#[derive(Debug, Clone)]
pub enum BuiltModel<T> {
    MeanField(MeanFieldModel<T>),
    Delay(DelayModel<T>),
    Hamiltonian(HamiltonianModel<T>),
}

impl SelfDriftConfig {
    fn build<T: Scalar>(&self) -> Result<SelfDrift<T>, ModelError> {
        match self {
            Self::Linear { a, c } => {
                let a = matrix("a", a)?;
                let c = vector(c, a.rows());
                Ok(SelfDrift::Affine { a, c })
            }
        }
    }
}

impl PairDriftConfig {
    fn build<T: Scalar>(&self, d: usize) -> Result<PairDrift<T>, ModelError> {
        Ok(match self {
            Self::Zero => PairDrift::Zero,
            Self::Linear { on_x, on_y, c } => PairDrift::Affine {
                on_x: matrix("on_x", on_x)?,
                on_y: matrix("on_y", on_y)?,
                c: vector(c, d),
            },
            Self::AttractiveQuadraticTanh { scale } => PairDrift::TanhDifference { scale: T::lit(*scale) },
        })
    }
}

impl PairDiffusionConfig {
    fn build<T: Scalar>(&self) -> Result<PairDiffusion<T>, ModelError> {
        Ok(match self {
            Self::ConstantSigma { matrix: m } => PairDiffusion::Constant(matrix("sigma", m)?),
            Self::KernelSigma { base, scale } => PairDiffusion::TanhSum {
                base: T::lit(*base),
                scale: T::lit(*scale),
            },
        })
    }
}

impl SegmentDriftConfig {
    fn build<T: Scalar>(&self, out: usize, state: usize) -> Result<SegmentDrift<T>, ModelError> {
        Ok(match self {
            Self::Zero => SegmentDrift::Zero,
            Self::LinearSegment {
                self_now,
                self_lag,
                other_now,
                other_lag,
                c,
            } => {
                let m = |name: &str, r: &Option<Rows>| match r {
                    Some(r) => matrix::<T>(name, r),
                    None => Ok(Matrix::zeros(out, state)),
                };
                SegmentDrift::Affine {
                    self_now: m("self_now", self_now)?,
                    self_lag: m("self_lag", self_lag)?,
                    other_now: m("other_now", other_now)?,
                    other_lag: m("other_lag", other_lag)?,
                    c: vector(c, out),
                }
            }
        })
    }
}

impl SegmentDiffusionConfig {
    fn build<T: Scalar>(&self) -> Result<SegmentDiffusion<T>, ModelError> {
        Ok(match self {
            Self::ConstantSigma { matrix: m } => SegmentDiffusion::Constant(matrix("sigma", m)?),
            Self::HeadTanhSigma { base, scale } => SegmentDiffusion::HeadTanh {
                base: T::lit(*base),
                scale: T::lit(*scale),
            },
        })
    }
}

impl ModelConfig {
    pub fn build<T: Scalar>(&self) -> Result<BuiltModel<T>, ModelError> {
        Ok(match self {
            Self::MeanField {
                d,
                n,
                regime,
                b0,
                b1,
                sigma,
                k_b,
                k1,
                k2,
                k_sigma,
                delta,
            } => {
                let distribution_free = matches!(sigma, PairDiffusionConfig::ConstantSigma { .. });
                BuiltModel::MeanField(MeanFieldModel::new(
                    *d,
                    n.unwrap_or(*d),
                    DriftSpec {
                        b0: b0.build()?,
                        b1: b1.build(*d)?,
                        k_b: T::lit(*k_b),
                        k1: T::lit(*k1),
                        k2: T::lit(*k2),
                    },
                    DiffusionKernelSpec {
                        sigma_tilde: sigma.build()?,
                        k_sigma: T::lit(*k_sigma),
                        delta: delta.map(T::lit),
                        distribution_free,
                    },
                    *regime,
                )?)
            }
            Self::Delay {
                d,
                n,
                r0,
                b,
                k_b,
                b_tilde,
                k_b_tilde,
                sigma,
                k_sigma,
            } => BuiltModel::Delay(DelayModel::new(
                *d,
                n.unwrap_or(*d),
                T::lit(*r0),
                b.build()?,
                T::lit(*k_b),
                b_tilde.build(*d, *d)?,
                T::lit(*k_b_tilde),
                sigma.build()?,
                T::lit(*k_sigma),
            )?),
            Self::Hamiltonian {
                a,
                k_a,
                coupling,
                b,
                k1,
                k2,
                b_tilde,
                k_b_tilde,
                sigma,
                r0,
            } => {
                let a = matrix("a", a)?;
                let sigma = matrix("sigma", sigma)?;
                let (m, d) = (a.rows(), sigma.rows());
                BuiltModel::Hamiltonian(HamiltonianModel::new(
                    a,
                    T::lit(*k_a),
                    matrix("coupling", coupling)?,
                    b.build()?,
                    T::lit(*k1),
                    T::lit(*k2),
                    b_tilde.build(d, m + d)?,
                    T::lit(*k_b_tilde),
                    sigma,
                    T::lit(*r0),
                )?)
            }
        })
    }

    /// State dimension of one particle (`m + d` for kinetic models).
    pub fn state_dim(&self) -> usize {
        match self {
            Self::MeanField { d, .. } | Self::Delay { d, .. } => *d,
            Self::Hamiltonian { a, sigma, .. } => a.len() + sigma.len(),
        }
    }
}
