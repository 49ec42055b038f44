//! Model specifications for the three families (mean-field, path-dependent
//! delay, kinetic/Hamiltonian) and validators for the constants and
//! thresholds the chaos estimates depend on.
//!
//! Regularity constants are declared by whoever builds the model; the
//! validators compare declared constants against thresholds exactly and
//! [`spot`] checks the declarations on random samples.

pub mod config;
pub mod kernels;
pub mod spot;

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::scalar::Scalar;

pub use kernels::{
    PairDiffusion, PairDrift, PairFn, PointFn, SegmentDiffusion, SegmentDrift, SegmentPairFn,
    SelfDrift,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("delay horizon r0 = {r0} is not an integer multiple of dt = {dt}")]
    DelayGrid { r0: f64, dt: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn require_nonneg<T: Scalar>(name: &str, v: T) -> Result<(), ModelError> {
    if v >= T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidArgument(format!("{name} must be a finite nonnegative number, got {v}")))
    }
}

fn require_shape<T: Scalar>(name: &str, m: &Matrix<T>, rows: usize, cols: usize) -> Result<(), ModelError> {
    if m.rows() == rows && m.cols() == cols {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.rows(),
            m.cols()
        )))
    }
}

fn require_len(name: &str, len: usize, expected: usize) -> Result<(), ModelError> {
    if len == expected {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch(format!("{name} has length {len}, expected {expected}")))
    }
}

/// Drift `b(x, μ) = b⁽⁰⁾(x) + ∫ b⁽¹⁾(x, y) μ(dy)` with its declared constants.
#[derive(Debug, Clone)]
pub struct DriftSpec<T> {
    pub b0: SelfDrift<T>,
    pub b1: PairDrift<T>,
    /// Lipschitz bound of `b⁽⁰⁾` and `b⁽¹⁾` in the finite-time regime.
    pub k_b: T,
    /// Dissipativity: `2⟨b⁽⁰⁾(x) − b⁽⁰⁾(x̃), x − x̃⟩ ≤ −K1 |x − x̃|²`.
    pub k1: T,
    /// Lipschitz bound of `b⁽¹⁾` (and squared-Lipschitz bound of `σ̃`) in the dissipative regime.
    pub k2: T,
}

/// Diffusion `σ(x, μ) = ∫ σ̃(x, y) μ(dy)` with its declared constants.
#[derive(Debug, Clone)]
pub struct DiffusionKernelSpec<T> {
    pub sigma_tilde: PairDiffusion<T>,
    /// Hilbert–Schmidt Lipschitz constant of `σ̃`.
    pub k_sigma: T,
    /// Two-sided ellipticity bound `δ⁻¹ ≤ σσ* ≤ δ`, when declared.
    pub delta: Option<T>,
    /// `σ` depends on the state only.
    pub distribution_free: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FiniteTime,
    Dissipative,
}

#[derive(Debug, Clone)]
pub struct MeanFieldModel<T> {
    d: usize,
    n: usize,
    pub drift: DriftSpec<T>,
    pub diffusion: DiffusionKernelSpec<T>,
    pub regime: Regime,
}

impl<T: Scalar> MeanFieldModel<T> {
    pub fn new(
        d: usize,
        n: usize,
        drift: DriftSpec<T>,
        diffusion: DiffusionKernelSpec<T>,
        regime: Regime,
    ) -> Result<Self, ModelError> {
        if d == 0 || n == 0 {
            return Err(ModelError::InvalidArgument("d and n must be positive".into()));
        }
        for (name, v) in [("K_b", drift.k_b), ("K1", drift.k1), ("K2", drift.k2), ("K_sigma", diffusion.k_sigma)] {
            require_nonneg(name, v)?;
        }
        if let Some(delta) = diffusion.delta {
            if !(delta >= T::one()) {
                return Err(ModelError::InvalidArgument(format!("delta must be >= 1, got {delta}")));
            }
        }
        if let SelfDrift::Affine { a, c } = &drift.b0 {
            require_shape("b0 matrix", a, d, d)?;
            require_len("b0 offset", c.len(), d)?;
        }
        if let PairDrift::Affine { on_x, on_y, c } = &drift.b1 {
            require_shape("b1 x-matrix", on_x, d, d)?;
            require_shape("b1 y-matrix", on_y, d, d)?;
            require_len("b1 offset", c.len(), d)?;
        }
        let (rows, cols) = diffusion.sigma_tilde.shape(d);
        if (rows, cols) != (d, n) {
            return Err(ModelError::DimensionMismatch(format!(
                "diffusion kernel is {rows}x{cols}, expected {d}x{n}"
            )));
        }
        Ok(Self {
            d,
            n,
            drift,
            diffusion,
            regime,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Every measure-dependent kernel can be averaged from the mean alone.
    pub fn is_affine_in_measure(&self) -> bool {
        self.drift.b1.is_affine_in_measure() && self.diffusion.sigma_tilde.is_affine_in_measure()
    }
}

/// Path-dependent mean-field model
/// `dX = b(X(t))dt + B(X_t, μ_t)dt + σ(X_t, μ_t)dW` with segment kernels.
#[derive(Debug, Clone)]
pub struct DelayModel<T> {
    d: usize,
    n: usize,
    r0: T,
    pub b: SelfDrift<T>,
    /// Dissipativity constant of `b`: `2⟨b(x) − b(y), x − y⟩ ≤ −K_b |x − y|²`.
    pub k_b: T,
    pub b_tilde: SegmentDrift<T>,
    /// Sup-norm Lipschitz constant of `B̃`.
    pub k_b_tilde: T,
    pub sigma_tilde: SegmentDiffusion<T>,
    /// Squared sup-norm Lipschitz constant of `σ̃`.
    pub k_sigma: T,
}

impl<T: Scalar> DelayModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        n: usize,
        r0: T,
        b: SelfDrift<T>,
        k_b: T,
        b_tilde: SegmentDrift<T>,
        k_b_tilde: T,
        sigma_tilde: SegmentDiffusion<T>,
        k_sigma: T,
    ) -> Result<Self, ModelError> {
        if d == 0 || n == 0 {
            return Err(ModelError::InvalidArgument("d and n must be positive".into()));
        }
        for (name, v) in [("r0", r0), ("K_b", k_b), ("K_B", k_b_tilde), ("K_sigma", k_sigma)] {
            require_nonneg(name, v)?;
        }
        if let SelfDrift::Affine { a, c } = &b {
            require_shape("b matrix", a, d, d)?;
            require_len("b offset", c.len(), d)?;
        }
        check_segment_drift(&b_tilde, d, d)?;
        let (rows, cols) = sigma_tilde.shape(d);
        if (rows, cols) != (d, n) {
            return Err(ModelError::DimensionMismatch(format!(
                "diffusion kernel is {rows}x{cols}, expected {d}x{n}"
            )));
        }
        Ok(Self {
            d,
            n,
            r0,
            b,
            k_b,
            b_tilde,
            k_b_tilde,
            sigma_tilde,
            k_sigma,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r0(&self) -> T {
        self.r0
    }

    /// Number of grid steps `L = r0 / dt`; `r0` must be an exact multiple of `dt`.
    pub fn lag_steps(&self, dt: T) -> Result<usize, ModelError> {
        lag_steps(self.r0, dt)
    }

    pub fn is_affine_in_measure(&self) -> bool {
        self.b_tilde.is_affine_in_measure() && self.sigma_tilde.is_affine_in_measure()
    }
}

pub(crate) fn lag_steps<T: Scalar>(r0: T, dt: T) -> Result<usize, ModelError> {
    if !(dt > T::zero()) {
        return Err(ModelError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let ratio = r0 / dt;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > T::lit(1e-6) * rounded.max(T::one()) {
        return Err(ModelError::DelayGrid {
            r0: r0.to_f64_lossy(),
            dt: dt.to_f64_lossy(),
        });
    }
    Ok(rounded.to_usize().unwrap_or(0))
}

fn check_segment_drift<T: Scalar>(k: &SegmentDrift<T>, out: usize, state: usize) -> Result<(), ModelError> {
    match k {
        SegmentDrift::Zero => Ok(()),
        SegmentDrift::Affine {
            self_now,
            self_lag,
            other_now,
            other_lag,
            c,
        } => {
            require_shape("B self_now", self_now, out, state)?;
            require_shape("B self_lag", self_lag, out, state)?;
            require_shape("B other_now", other_now, out, state)?;
            require_shape("B other_lag", other_lag, out, state)?;
            require_len("B offset", c.len(), out)
        }
        SegmentDrift::Custom { out_dim, .. } => require_len("B output", *out_dim, out),
    }
}

/// Kinetic system on `R^{m+d}`:
/// `dX⁽¹⁾ = (A X⁽¹⁾ + M X⁽²⁾)dt`, `dX⁽²⁾ = (b(X⁽²⁾) + B(X_t, μ_t))dt + σ dW`.
#[derive(Debug, Clone)]
pub struct HamiltonianModel<T> {
    m: usize,
    d: usize,
    pub a: Matrix<T>,
    /// `2⟨A(x − x̃), x − x̃⟩ ≤ −K_A |x − x̃|²`.
    pub k_a: T,
    pub coupling: Matrix<T>,
    pub b: SelfDrift<T>,
    /// Dissipativity constant of `b`.
    pub k1: T,
    /// Lipschitz constant of `b`.
    pub k2: T,
    /// `B̃` acting on segments of the full `(m + d)`-dimensional path, valued in `R^d`.
    pub b_tilde: SegmentDrift<T>,
    pub k_b_tilde: T,
    pub sigma: Matrix<T>,
    r0: T,
}

impl<T: Scalar> HamiltonianModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Matrix<T>,
        k_a: T,
        coupling: Matrix<T>,
        b: SelfDrift<T>,
        k1: T,
        k2: T,
        b_tilde: SegmentDrift<T>,
        k_b_tilde: T,
        sigma: Matrix<T>,
        r0: T,
    ) -> Result<Self, ModelError> {
        let m = a.rows();
        let d = sigma.rows();
        if m == 0 || d == 0 {
            return Err(ModelError::InvalidArgument("m and d must be positive".into()));
        }
        require_shape("A", &a, m, m)?;
        require_shape("M", &coupling, m, d)?;
        require_shape("sigma", &sigma, d, d)?;
        for (name, v) in [("K_A", k_a), ("K1", k1), ("K2", k2), ("K_B", k_b_tilde), ("r0", r0)] {
            require_nonneg(name, v)?;
        }
        if let SelfDrift::Affine { a: mb, c } = &b {
            require_shape("b matrix", mb, d, d)?;
            require_len("b offset", c.len(), d)?;
        }
        check_segment_drift(&b_tilde, d, m + d)?;
        Ok(Self {
            m,
            d,
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
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r0(&self) -> T {
        self.r0
    }

    pub fn lag_steps(&self, dt: T) -> Result<usize, ModelError> {
        lag_steps(self.r0, dt)
    }
}

/// `sup_{v ∈ [0, K]} v e^{−v r0}` in closed form.
///
/// The map `v ↦ v e^{−v r0}` increases up to `v = 1/r0`, so the supremum is
/// attained at `K` when `K ≤ 1/r0` (or `r0 = 0`) and equals `1/(e r0)` otherwise.
pub fn sup_rate<T: Scalar>(k: T, r0: T) -> Result<T, ModelError> {
    require_nonneg("K", k)?;
    require_nonneg("r0", r0)?;
    if r0 == T::zero() || k * r0 <= T::one() {
        Ok(k * (-k * r0).exp())
    } else {
        Ok(T::one() / (T::one().exp() * r0))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DissipativeReport<T> {
    pub regime_is_dissipative: bool,
    pub k1: T,
    pub k2: T,
    /// `K1 − 8 K2`.
    pub margin: T,
    pub passed: bool,
    /// Contraction rate `(K1 − 8 K2) / 2` of the squared coupling gap.
    pub rate: T,
}

/// Checks `K1 > 8 K2` on the declared constants (no tolerance).
pub fn validate_dissipative<T: Scalar>(model: &MeanFieldModel<T>) -> DissipativeReport<T> {
    let k1 = model.drift.k1;
    let k2 = model.drift.k2;
    let margin = k1 - T::lit(8.0) * k2;
    DissipativeReport {
        regime_is_dissipative: model.regime == Regime::Dissipative,
        k1,
        k2,
        margin,
        passed: margin > T::zero() && k1 > T::zero() && k2 > T::zero(),
        rate: margin / T::lit(2.0),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DelayReport<T> {
    pub sup: T,
    /// `72 K_σ + 8 K_B`.
    pub threshold_lhs: T,
    pub passed: bool,
    /// `Λ = (sup − (72 K_σ + 8 K_B)) / 2`.
    pub lambda: T,
    /// `Λ̃ = sup − (36 K_σ + 8 K_B)`.
    pub lambda_tilde: T,
    /// `e^{K_b r0} Λ`.
    pub decay_rate: T,
}

pub fn validate_delay<T: Scalar>(model: &DelayModel<T>) -> Result<DelayReport<T>, ModelError> {
    let sup = sup_rate(model.k_b, model.r0)?;
    let lhs = T::lit(72.0) * model.k_sigma + T::lit(8.0) * model.k_b_tilde;
    let lambda = (sup - lhs) / T::lit(2.0);
    let lambda_tilde = sup - (T::lit(36.0) * model.k_sigma + T::lit(8.0) * model.k_b_tilde);
    Ok(DelayReport {
        sup,
        threshold_lhs: lhs,
        passed: lhs < sup,
        lambda,
        lambda_tilde,
        decay_rate: (model.k_b * model.r0).exp() * lambda,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HamiltonianReport<T> {
    /// `sup_{v ∈ [0, K1 ∧ K_A]} v e^{−v r0}`.
    pub sup: T,
    /// `4 K_B + 2 ‖M‖`.
    pub threshold_lhs: T,
    pub threshold_passed: bool,
    pub lambda: T,
    /// `e^{(K1 ∧ K_A) r0} Λ`, the analogue of the delay decay rate.
    pub decay_rate: T,
    pub coupling_norm: T,
    pub kalman_rank: usize,
    pub rank_passed: bool,
    pub sigma_min_singular_value: T,
    pub passed: bool,
}

pub fn validate_hamiltonian<T: Scalar>(model: &HamiltonianModel<T>) -> Result<HamiltonianReport<T>, ModelError> {
    let k = model.k1.min(model.k_a);
    let sup = sup_rate(k, model.r0)?;
    let coupling_norm = linalg::spectral_norm(&model.coupling, T::lit(1e-10));
    let lhs = T::lit(4.0) * model.k_b_tilde + T::lit(2.0) * coupling_norm;
    let lambda = (sup - lhs) / T::lit(2.0);
    let rank = kalman_rank(&model.a, &model.coupling)?;
    let sigma_min = linalg::singular_values(&model.sigma)
        .last()
        .copied()
        .unwrap_or(T::zero());
    let threshold_passed = lhs < sup;
    let rank_passed = rank == model.m;
    Ok(HamiltonianReport {
        sup,
        threshold_lhs: lhs,
        threshold_passed,
        lambda,
        decay_rate: (k * model.r0).exp() * lambda,
        coupling_norm,
        kalman_rank: rank,
        rank_passed,
        sigma_min_singular_value: sigma_min,
        passed: threshold_passed && rank_passed && sigma_min > T::zero(),
    })
}

/// Rank of the controllability matrix `[M, AM, …, A^{m−1}M]`.
pub fn kalman_rank<T: Scalar>(a: &Matrix<T>, coupling: &Matrix<T>) -> Result<usize, ModelError> {
    let m = a.rows();
    require_shape("A", a, m, m)?;
    if coupling.rows() != m {
        return Err(ModelError::DimensionMismatch(format!(
            "M has {} rows, A is {m}x{m}",
            coupling.rows()
        )));
    }
    let mut block = coupling.clone();
    let mut ctrb = coupling.clone();
    for _ in 1..m {
        block = a.matmul(&block)?;
        ctrb = ctrb.hcat(&block)?;
    }
    Ok(linalg::numerical_rank(&ctrb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Grid maximum of `v e^{-v r0}` over `[0, K]`.
    fn grid_sup(k: f64, r0: f64, points: usize) -> f64 {
        (0..=points)
            .map(|i| {
                let v = k * i as f64 / points as f64;
                v * (-v * r0).exp()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn sup_rate_examples() {
        assert_eq!(sup_rate(2.0, 0.0).unwrap(), 2.0);
        assert_eq!(sup_rate(0.0, 1.0).unwrap(), 0.0);
        // frozen from grid search over [0, K]
        let g1 = grid_sup(5.0, 1.0, 1_000_000);
        let g2 = grid_sup(0.25, 2.0, 1_000_000);
        assert!((g1 - 0.367_879_4).abs() < 1e-7);
        assert!((g2 - 0.151_632_7).abs() < 1e-7);
        assert!((sup_rate(5.0, 1.0).unwrap() - g1).abs() < 1e-9);
        assert!((sup_rate(0.25, 2.0).unwrap() - g2).abs() < 1e-12);
        assert!(sup_rate(-1.0, 1.0).is_err());
        assert!(sup_rate(1.0, -1.0).is_err());
        assert!((sup_rate(5.0f32, 1.0).unwrap() - 0.367_879_4).abs() < 1e-6);
    }

    fn mf(k1: f64, k2: f64) -> MeanFieldModel<f64> {
        MeanFieldModel::new(
            1,
            1,
            DriftSpec {
                b0: SelfDrift::linear(mat(&[&[-k1 / 2.0]])),
                b1: PairDrift::Zero,
                k_b: k1 / 2.0,
                k1,
                k2,
            },
            DiffusionKernelSpec {
                sigma_tilde: PairDiffusion::Constant(mat(&[&[1.0]])),
                k_sigma: 0.0,
                delta: Some(1.0),
                distribution_free: true,
            },
            Regime::Dissipative,
        )
        .unwrap()
    }

    #[test]
    fn dissipative_examples() {
        let r = validate_dissipative(&mf(9.0, 1.0));
        assert!(r.passed);
        assert_eq!(r.rate, 0.5);
        assert!(!validate_dissipative(&mf(8.0, 1.0)).passed);
        let r = validate_dissipative(&mf(0.9, 0.1));
        assert!(r.passed);
        assert!((r.rate - 0.05).abs() < 1e-15);
    }

    fn delay(k_b: f64, r0: f64, k_sigma: f64, k_bt: f64) -> DelayModel<f64> {
        DelayModel::new(
            1,
            1,
            r0,
            SelfDrift::linear(mat(&[&[-k_b / 2.0]])),
            k_b,
            SegmentDrift::Zero,
            k_bt,
            SegmentDiffusion::Constant(mat(&[&[1.0]])),
            k_sigma,
        )
        .unwrap()
    }

    #[test]
    fn delay_examples() {
        let r = validate_delay(&delay(5.0, 1.0, 0.001, 0.01)).unwrap();
        assert!(r.passed);
        let expect = 0.5 * ((-1.0f64).exp() - 0.152);
        assert!((r.lambda - expect).abs() < 1e-12);
        assert!((r.lambda - 0.107_939_7).abs() < 1e-7);
        assert!((r.decay_rate - 5.0f64.exp() * r.lambda).abs() < 1e-12);
        for (k_b, r0) in [(0.5, 0.0), (10.0, 0.0), (79.0, 0.0), (5.0, 1.0)] {
            assert!(!validate_delay(&delay(k_b, r0, 1.0, 1.0)).unwrap().passed);
        }
        let r = validate_delay(&delay(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(r.passed);
        assert_eq!(r.lambda, 0.5);
        assert_eq!(r.lambda_tilde, 1.0);
    }

    #[test]
    fn kalman_rank_examples() {
        assert_eq!(kalman_rank(&mat(&[&[0.0]]), &mat(&[&[1.0]])).unwrap(), 1);
        assert_eq!(
            kalman_rank(&mat(&[&[2.0, 0.0], &[0.0, 3.0]]), &mat(&[&[1.0], &[0.0]])).unwrap(),
            1
        );
        assert_eq!(
            kalman_rank(&mat(&[&[0.0, 1.0], &[0.0, 0.0]]), &mat(&[&[0.0], &[1.0]])).unwrap(),
            2
        );
        assert!(kalman_rank(&mat(&[&[0.0, 1.0], &[0.0, 0.0]]), &mat(&[&[1.0]])).is_err());
    }

    fn hamiltonian(a: Matrix<f64>, coupling: Matrix<f64>, k: f64, k_bt: f64, r0: f64) -> HamiltonianModel<f64> {
        let d = coupling.cols();
        HamiltonianModel::new(
            a,
            k,
            coupling,
            SelfDrift::linear(Matrix::identity(d).scale(-k / 2.0)),
            k,
            k / 2.0,
            SegmentDrift::Zero,
            k_bt,
            Matrix::identity(d),
            r0,
        )
        .unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let r = validate_hamiltonian(&hamiltonian(mat(&[&[-2.5]]), mat(&[&[0.1]]), 5.0, 0.01, 1.0)).unwrap();
        assert!((r.threshold_lhs - 0.24).abs() < 1e-9);
        assert!((r.sup - (-1.0f64).exp()).abs() < 1e-12);
        assert!(r.threshold_passed && r.passed);

        let r = validate_hamiltonian(&hamiltonian(Matrix::identity(2).scale(-1.0), Matrix::zeros(2, 1), 1.0, 0.0, 0.0))
            .unwrap();
        assert!(!r.rank_passed && !r.passed);
        assert_eq!(r.kalman_rank, 0);

        let r = validate_hamiltonian(&hamiltonian(mat(&[&[0.0, 1.0], &[0.0, 0.0]]), mat(&[&[0.0], &[1.0]]), 5.0, 0.0, 0.0))
            .unwrap();
        assert_eq!(r.kalman_rank, 2);
        assert!(r.rank_passed);
    }

    #[test]
    fn lag_steps_enforces_grid() {
        assert_eq!(lag_steps(0.1, 1e-3).unwrap(), 100);
        assert_eq!(lag_steps(0.0, 1e-3).unwrap(), 0);
        assert!(matches!(lag_steps(0.1005, 1e-3), Err(ModelError::DelayGrid { .. })));
    }

    #[test]
    fn dimension_checks() {
        let bad = MeanFieldModel::new(
            2,
            1,
            DriftSpec {
                b0: SelfDrift::linear(mat(&[&[-1.0]])),
                b1: PairDrift::Zero,
                k_b: 1.0,
                k1: 0.0,
                k2: 0.0,
            },
            DiffusionKernelSpec {
                sigma_tilde: PairDiffusion::Constant(mat(&[&[1.0], &[1.0]])),
                k_sigma: 0.0,
                delta: None,
                distribution_free: true,
            },
            Regime::FiniteTime,
        );
        assert!(matches!(bad, Err(ModelError::DimensionMismatch(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn sup_rate_matches_grid_maximum(k in 0.0f64..20.0, r0 in 0.0f64..5.0) {
                let exact = sup_rate(k, r0).unwrap();
                let grid = grid_sup(k, r0, 1_000_000);
                prop_assert!(exact >= grid * (1.0 - 1e-12));
                prop_assert!((exact - grid).abs() <= 1e-6 * exact.max(1e-300));
            }

            #[test]
            fn sup_rate_monotone(k in 0.0f64..20.0, dk in 0.0f64..5.0, r0 in 0.0f64..5.0, dr in 0.0f64..5.0) {
                prop_assert!(sup_rate(k + dk, r0).unwrap() >= sup_rate(k, r0).unwrap());
                prop_assert!(sup_rate(k, r0 + dr).unwrap() <= sup_rate(k, r0).unwrap());
            }

            #[test]
            fn dissipative_threshold_is_exact(k1 in 0.001f64..50.0, k2 in 0.001f64..10.0) {
                prop_assert_eq!(validate_dissipative(&mf(k1, k2)).passed, k1 - 8.0 * k2 > 0.0);
            }

            #[test]
            fn kalman_rank_invariant_under_column_mixing(
                a in proptest::collection::vec(-2.0f64..2.0, 9),
                mm in proptest::collection::vec(-2.0f64..2.0, 6),
                g in proptest::collection::vec(-2.0f64..2.0, 4),
            ) {
                let a = Matrix::from_vec(3, 3, a);
                let m = Matrix::from_vec(3, 2, mm);
                let g = Matrix::from_vec(2, 2, g);
                let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
                prop_assume!(det.abs() > 0.1);
                let mg = m.matmul(&g).unwrap();
                prop_assert_eq!(kalman_rank(&a, &m).unwrap(), kalman_rank(&a, &mg).unwrap());
            }
        }
    }
}
