//! Simulation and analysis of interacting particle systems and their
//! mean-field limits: synchronous coupling of an N-particle system with
//! independent copies of the limit process, exact Gaussian moment oracles,
//! optimal-transport and entropy metrics, and scripted scaling experiments.
//!
//! The numerical core is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32` and `f64`). The aliases below fix it to `f64`,
//! which is what the experiments and the command-line tool use.

pub mod dynamics;
pub mod experiments;
pub mod linalg;
pub mod measure;
pub mod metrics;
pub mod models;
pub mod noise;
pub mod oracle;
pub mod scalar;
pub mod segment;
pub mod stats;

pub type Matrix = linalg::Matrix<f64>;
pub type Ensemble = dynamics::Ensemble<f64>;
pub type FrozenLaw = dynamics::FrozenLaw<f64>;
pub type ReferenceLaw = dynamics::ReferenceLaw<f64>;
pub type GaussianPath = dynamics::GaussianPath<f64>;
pub type CoupledRun = dynamics::CoupledRun<f64>;
pub type MeanFieldModel = models::MeanFieldModel<f64>;
pub type DelayModel = models::DelayModel<f64>;
pub type HamiltonianModel = models::HamiltonianModel<f64>;
pub type BuiltModel = models::config::BuiltModel<f64>;
pub type PointCloud = metrics::PointCloud<f64>;
pub type GaussianLaw = metrics::GaussianLaw<f64>;
pub type LinearModelSpec = oracle::LinearModelSpec<f64>;
pub type ExchangeableGaussian = oracle::ExchangeableGaussian<f64>;
