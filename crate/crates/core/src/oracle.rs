//! Exact Gaussian laws for linear mean-field models.
//!
//! With `b⁽⁰⁾(x) = A₀x + c₀`, `b⁽¹⁾(x, y) = B₁x + B₂y + c₁` and constant `Σ`,
//! both the limit process and the N-particle system are Gaussian. Writing
//! `A = A₀ + B₁`, the limit moments solve
//!
//! ```text
//! m' = (A + B₂) m + c₀ + c₁,     S' = A S + S Aᵀ + ΣΣᵀ,
//! ```
//!
//! and the exchangeable N-particle law (per-particle block `S`, cross block
//! `C`, `Q = S + (N − 1) C`) solves
//!
//! ```text
//! S' = A S + S Aᵀ + (B₂ Q + Q B₂ᵀ)/N + ΣΣᵀ,
//! C' = A C + C Aᵀ + (B₂ Q + Q B₂ᵀ)/N,
//! ```
//!
//! with the same mean as the limit. [`full_lyapunov`] integrates the
//! unreduced `N·d`-dimensional system for cross-checking.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::metrics::{gaussian_kl, gaussian_w2, GaussianLaw, MetricsError};
use crate::models::{
    DiffusionKernelSpec, DriftSpec, MeanFieldModel, ModelError, PairDiffusion, PairDrift, Regime, SelfDrift,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("covariance lost positive semidefiniteness (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("model is not linear: {0}")]
    NotLinear(&'static str),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearModelSpec<T> {
    pub a0: Matrix<T>,
    pub c0: Vec<T>,
    pub b1: Matrix<T>,
    pub b2: Matrix<T>,
    pub c1: Vec<T>,
    /// `d × n` constant diffusion.
    pub sigma: Matrix<T>,
}

fn shape<T: Scalar>(name: &str, m: &Matrix<T>, r: usize, c: usize) -> Result<(), OracleError> {
    if m.rows() != r || m.cols() != c {
        return Err(OracleError::DimensionMismatch(format!(
            "{name} is {}x{}, expected {r}x{c}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

impl<T: Scalar> LinearModelSpec<T> {
    pub fn new(
        a0: Matrix<T>,
        c0: Vec<T>,
        b1: Matrix<T>,
        b2: Matrix<T>,
        c1: Vec<T>,
        sigma: Matrix<T>,
    ) -> Result<Self, OracleError> {
        let d = a0.rows();
        shape("A0", &a0, d, d)?;
        shape("B1", &b1, d, d)?;
        shape("B2", &b2, d, d)?;
        if sigma.rows() != d {
            return Err(OracleError::DimensionMismatch(format!("Sigma has {} rows, d = {d}", sigma.rows())));
        }
        if c0.len() != d || c1.len() != d {
            return Err(OracleError::DimensionMismatch("offset vectors must have length d".into()));
        }
        Ok(Self {
            a0,
            c0,
            b1,
            b2,
            c1,
            sigma,
        })
    }

    /// `b⁽⁰⁾ = A₀x`, `b⁽¹⁾ = B₂y`, zero offsets.
    pub fn homogeneous(a0: Matrix<T>, b2: Matrix<T>, sigma: Matrix<T>) -> Result<Self, OracleError> {
        let d = a0.rows();
        Self::new(a0, vec![T::zero(); d], Matrix::zeros(d, d), b2, vec![T::zero(); d], sigma)
    }

    pub fn d(&self) -> usize {
        self.a0.rows()
    }

    /// `K1 = −2 λ_max(sym A₀)` (may be negative) and `K2 = ‖B₁‖ + ‖B₂‖`.
    pub fn induced_constants(&self) -> Result<(T, T), OracleError> {
        let (vals, _) = linalg::sym_eigen(&self.a0.symmetric_part())?;
        let k1 = -T::lit(2.0) * vals[vals.len() - 1];
        let tol = T::lit(1e-12);
        let k2 = linalg::spectral_norm(&self.b1, tol) + linalg::spectral_norm(&self.b2, tol);
        Ok((k1, k2))
    }

    /// The same model as a [`MeanFieldModel`] with affine kernels.
    pub fn to_model(&self, regime: Regime) -> Result<MeanFieldModel<T>, OracleError> {
        let (k1, k2) = self.induced_constants()?;
        let tol = T::lit(1e-12);
        let k_b = linalg::spectral_norm(&self.a0, tol).max(k2);
        let d = self.d();
        Ok(MeanFieldModel::new(
            d,
            self.sigma.cols(),
            DriftSpec {
                b0: SelfDrift::Affine {
                    a: self.a0.clone(),
                    c: self.c0.clone(),
                },
                b1: PairDrift::Affine {
                    on_x: self.b1.clone(),
                    on_y: self.b2.clone(),
                    c: self.c1.clone(),
                },
                k_b,
                k1: k1.max(T::zero()),
                k2,
            },
            DiffusionKernelSpec {
                sigma_tilde: PairDiffusion::Constant(self.sigma.clone()),
                k_sigma: T::zero(),
                delta: None,
                distribution_free: true,
            },
            regime,
        )?)
    }

    /// Reads the linear structure back from a model with affine kernels.
    pub fn from_model(model: &MeanFieldModel<T>) -> Result<Self, OracleError> {
        let d = model.d();
        let (a0, c0) = match &model.drift.b0 {
            SelfDrift::Affine { a, c } => (a.clone(), c.clone()),
            SelfDrift::Custom(_) => return Err(OracleError::NotLinear("b0 is a custom kernel")),
        };
        let (b1, b2, c1) = match &model.drift.b1 {
            PairDrift::Zero => (Matrix::zeros(d, d), Matrix::zeros(d, d), vec![T::zero(); d]),
            PairDrift::Affine { on_x, on_y, c } => (on_x.clone(), on_y.clone(), c.clone()),
            _ => return Err(OracleError::NotLinear("b1 is not affine")),
        };
        let sigma = match &model.diffusion.sigma_tilde {
            PairDiffusion::Constant(m) => m.clone(),
            _ => return Err(OracleError::NotLinear("sigma is not constant")),
        };
        Self::new(a0, c0, b1, b2, c1, sigma)
    }

    fn sigma_sq(&self) -> Matrix<T> {
        self.sigma.matmul(&self.sigma.transpose()).expect("conformable")
    }
}

/// Law of `N` exchangeable particles: common mean, diagonal block `Σ`, off-diagonal block `C`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExchangeableGaussian<T> {
    pub mean: Vec<T>,
    pub sigma: Matrix<T>,
    pub cross: Matrix<T>,
    pub n: usize,
}

fn min_eigenvalue<T: Scalar>(m: &Matrix<T>) -> Result<T, OracleError> {
    let (vals, _) = linalg::sym_eigen(&m.symmetric_part())?;
    Ok(vals[0])
}

impl<T: Scalar> ExchangeableGaussian<T> {
    /// Checks `Σ − C ⪰ 0` and `Σ + (N − 1) C ⪰ 0`, the eigenvalue blocks of the joint covariance.
    pub fn new(mean: Vec<T>, sigma: Matrix<T>, cross: Matrix<T>, n: usize) -> Result<Self, OracleError> {
        let d = mean.len();
        shape("Sigma", &sigma, d, d)?;
        shape("C", &cross, d, d)?;
        if n == 0 {
            return Err(OracleError::InvalidArgument("N must be positive".into()));
        }
        let g = Self { mean, sigma, cross, n };
        g.check_psd(T::lit(1e-10))?;
        Ok(g)
    }

    /// Independent particles with a common law.
    pub fn independent(mean: Vec<T>, sigma: Matrix<T>, n: usize) -> Result<Self, OracleError> {
        let d = mean.len();
        Self::new(mean, sigma, Matrix::zeros(d, d), n)
    }

    fn check_psd(&self, tol: T) -> Result<(), OracleError> {
        let scale = self.sigma.max_abs().max(T::one());
        let diff = self.sigma.sub(&self.cross)?;
        let q = self
            .sigma
            .add(&self.cross.scale(T::from_usize_lossy(self.n - 1)))?;
        for m in [diff, q] {
            let lo = min_eigenvalue(&m)?;
            if lo < -tol * scale {
                return Err(OracleError::NotPsd(lo.to_f64_lossy()));
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    /// Full `N·d`-dimensional law.
    pub fn joint(&self) -> Result<GaussianLaw<T>, OracleError> {
        k_marginal(self, self.n)
    }
}

/// Law of the first `k` particles of an exchangeable Gaussian.
pub fn k_marginal<T: Scalar>(joint: &ExchangeableGaussian<T>, k: usize) -> Result<GaussianLaw<T>, OracleError> {
    if k == 0 || k > joint.n {
        return Err(OracleError::InvalidArgument(format!("need 1 <= k <= N, got k={k}, N={}", joint.n)));
    }
    let d = joint.d();
    let mut cov = Matrix::zeros(k * d, k * d);
    for a in 0..k {
        for b in 0..k {
            let block = if a == b { &joint.sigma } else { &joint.cross };
            cov.set_block(a * d, b * d, block);
        }
    }
    let mean = (0..k).flat_map(|_| joint.mean.iter().copied()).collect();
    Ok(GaussianLaw::new(mean, cov)?)
}

/// `k`-fold product of a law on `R^d`.
pub fn product_law<T: Scalar>(law: &GaussianLaw<T>, k: usize) -> Result<GaussianLaw<T>, OracleError> {
    let d = law.dim();
    let mut cov = Matrix::zeros(k * d, k * d);
    for a in 0..k {
        cov.set_block(a * d, a * d, law.cov());
    }
    let mean = (0..k).flat_map(|_| law.mean().iter().copied()).collect();
    Ok(GaussianLaw::new(mean, cov)?)
}

/// Laws on the grid `t_j = j · dt`, `j = 0..=steps`.
#[derive(Debug, Clone, Serialize)]
pub struct MomentPath<L, T> {
    pub dt: T,
    pub laws: Vec<L>,
}

impl<L, T: Scalar> MomentPath<L, T> {
    pub fn last(&self) -> &L {
        self.laws.last().expect("nonempty path")
    }

    pub fn time(&self, j: usize) -> T {
        T::from_usize_lossy(j) * self.dt
    }
}

fn grid_steps<T: Scalar>(t_end: T, dt: T) -> Result<usize, OracleError> {
    if !(dt > T::zero()) || !(t_end >= T::zero()) {
        return Err(OracleError::InvalidArgument(format!("need dt > 0 and T >= 0, got dt={dt}, T={t_end}")));
    }
    let r = t_end / dt;
    let steps = r.round();
    if (r - steps).abs() > T::lit(1e-6) * steps.max(T::one()) {
        return Err(OracleError::InvalidArgument(format!("T = {t_end} is not a multiple of dt = {dt}")));
    }
    Ok(steps.to_usize().unwrap_or(0))
}

/// One classical RK4 step for `y' = f(y)`.
fn rk4_step<T: Scalar>(y: &[T], h: T, f: &impl Fn(&[T], &mut [T])) -> Vec<T> {
    let n = y.len();
    let half = h / T::lit(2.0);
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];
    f(y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + half * k1[i];
    }
    f(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + half * k2[i];
    }
    f(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(&tmp, &mut k4);
    let sixth = h / T::lit(6.0);
    (0..n)
        .map(|i| y[i] + sixth * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]))
        .collect()
}

/// `out ← M X + X Mᵀ` for square `d × d` blocks stored row-major.
fn lyap_into<T: Scalar>(m: &Matrix<T>, x: &[T], d: usize, out: &mut [T]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = T::zero();
            for l in 0..d {
                s += m[(i, l)] * x[l * d + j] + x[i * d + l] * m[(j, l)];
            }
            out[i * d + j] = s;
        }
    }
}

/// Mean and covariance of the limit process on the grid `j · dt_ode`.
pub fn propagate_limit_moments<T: Scalar>(
    spec: &LinearModelSpec<T>,
    m0: &[T],
    s0: &Matrix<T>,
    t_end: T,
    dt_ode: T,
) -> Result<MomentPath<GaussianLaw<T>, T>, OracleError> {
    let d = spec.d();
    if m0.len() != d {
        return Err(OracleError::DimensionMismatch(format!("m0 has length {}, d = {d}", m0.len())));
    }
    shape("S0", s0, d, d)?;
    let steps = grid_steps(t_end, dt_ode)?;
    let a = spec.a0.add(&spec.b1)?;
    let a_mean = a.add(&spec.b2)?;
    let offset: Vec<T> = spec.c0.iter().zip(&spec.c1).map(|(x, y)| *x + *y).collect();
    let ss = spec.sigma_sq();
    let rhs = |y: &[T], out: &mut [T]| {
        a_mean.mul_vec_into(&y[..d], &mut out[..d]);
        for (o, c) in out[..d].iter_mut().zip(&offset) {
            *o += *c;
        }
        lyap_into(&a, &y[d..], d, &mut out[d..]);
        for (o, q) in out[d..].iter_mut().zip(ss.as_slice()) {
            *o += *q;
        }
    };
    let mut y: Vec<T> = m0.iter().copied().chain(s0.as_slice().iter().copied()).collect();
    let law = |y: &[T]| GaussianLaw::new(y[..d].to_vec(), Matrix::from_vec(d, d, y[d..].to_vec()).symmetric_part());
    let mut laws = Vec::with_capacity(steps + 1);
    laws.push(law(&y)?);
    for _ in 0..steps {
        y = rk4_step(&y, dt_ode, &rhs);
        laws.push(law(&y)?);
    }
    Ok(MomentPath { dt: dt_ode, laws })
}

/// Exact exchangeable law of the N-particle system on the grid `j · dt_ode`.
pub fn propagate_interacting_moments<T: Scalar>(
    spec: &LinearModelSpec<T>,
    init: &ExchangeableGaussian<T>,
    t_end: T,
    dt_ode: T,
) -> Result<MomentPath<ExchangeableGaussian<T>, T>, OracleError> {
    let d = spec.d();
    if init.d() != d {
        return Err(OracleError::DimensionMismatch(format!("initial law has d = {}, model d = {d}", init.d())));
    }
    let n = init.n;
    let steps = grid_steps(t_end, dt_ode)?;
    let a = spec.a0.add(&spec.b1)?;
    let a_mean = a.add(&spec.b2)?;
    let offset: Vec<T> = spec.c0.iter().zip(&spec.c1).map(|(x, y)| *x + *y).collect();
    let ss = spec.sigma_sq();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let nm1 = T::from_usize_lossy(n - 1);
    let dd = d * d;
    let rhs = |y: &[T], out: &mut [T]| {
        let (m, rest) = y.split_at(d);
        let (s, c) = rest.split_at(dd);
        let (om, orest) = out.split_at_mut(d);
        let (os, oc) = orest.split_at_mut(dd);
        a_mean.mul_vec_into(m, om);
        for (o, q) in om.iter_mut().zip(&offset) {
            *o += *q;
        }
        let q: Vec<T> = s.iter().zip(c).map(|(si, ci)| *si + nm1 * *ci).collect();
        let mut coupling = vec![T::zero(); dd];
        lyap_into(&spec.b2, &q, d, &mut coupling);
        lyap_into(&a, s, d, os);
        lyap_into(&a, c, d, oc);
        for k in 0..dd {
            let cpl = inv_n * coupling[k];
            os[k] += cpl + ss.as_slice()[k];
            oc[k] += cpl;
        }
    };
    let mut y: Vec<T> = init
        .mean
        .iter()
        .chain(init.sigma.as_slice())
        .chain(init.cross.as_slice())
        .copied()
        .collect();
    let law = |y: &[T]| {
        let g = ExchangeableGaussian {
            mean: y[..d].to_vec(),
            sigma: Matrix::from_vec(d, d, y[d..d + dd].to_vec()).symmetric_part(),
            cross: Matrix::from_vec(d, d, y[d + dd..].to_vec()).symmetric_part(),
            n,
        };
        g.check_psd(T::lit(1e-8)).map(|_| g)
    };
    let mut laws = Vec::with_capacity(steps + 1);
    laws.push(law(&y)?);
    for _ in 0..steps {
        y = rk4_step(&y, dt_ode, &rhs);
        laws.push(law(&y)?);
    }
    Ok(MomentPath { dt: dt_ode, laws })
}

/// RK4 on the unreduced `N·d` system `P' = 𝔸P + P𝔸ᵀ + I ⊗ ΣΣᵀ` with
/// `𝔸 = I ⊗ A + (1/N) 11ᵀ ⊗ B₂`. Returns the law at `t_end`.
pub fn full_lyapunov<T: Scalar>(
    spec: &LinearModelSpec<T>,
    init: &ExchangeableGaussian<T>,
    t_end: T,
    dt_ode: T,
) -> Result<GaussianLaw<T>, OracleError> {
    let d = spec.d();
    let n = init.n;
    let nd = n * d;
    let steps = grid_steps(t_end, dt_ode)?;
    let a = spec.a0.add(&spec.b1)?;
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut big = Matrix::zeros(nd, nd);
    for i in 0..n {
        for j in 0..n {
            let mut block = spec.b2.scale(inv_n);
            if i == j {
                block = block.add(&a)?;
            }
            big.set_block(i * d, j * d, &block);
        }
    }
    let ss = spec.sigma_sq();
    let mut noise = Matrix::zeros(nd, nd);
    for i in 0..n {
        noise.set_block(i * d, i * d, &ss);
    }
    let offset: Vec<T> = (0..n)
        .flat_map(|_| spec.c0.iter().zip(&spec.c1).map(|(x, y)| *x + *y))
        .collect();
    let rhs = |y: &[T], out: &mut [T]| {
        let (m, p) = y.split_at(nd);
        let (om, op) = out.split_at_mut(nd);
        big.mul_vec_into(m, om);
        for (o, c) in om.iter_mut().zip(&offset) {
            *o += *c;
        }
        lyap_into(&big, p, nd, op);
        for (o, q) in op.iter_mut().zip(noise.as_slice()) {
            *o += *q;
        }
    };
    let joint = init.joint()?;
    let mut y: Vec<T> = joint.mean().iter().chain(joint.cov().as_slice()).copied().collect();
    for _ in 0..steps {
        y = rk4_step(&y, dt_ode, &rhs);
    }
    Ok(GaussianLaw::new(
        y[..nd].to_vec(),
        Matrix::from_vec(nd, nd, y[nd..].to_vec()).symmetric_part(),
    )?)
}

/// `E|X^{1,N}_t − X^1_t|²` on the grid `j · dt_ode` for the synchronous
/// coupling with matched i.i.d. `N(m0, S0)` initial states, the limit copy
/// being driven by the exact limit mean.
///
/// With `D = X^{1,N} − X^1` and `E = X̄^N − m`, the pair solves
/// `dD = (A D + B₂ E)dt`, `dE = (A + B₂)E dt + Σ dW̄` with `W̄` the average
/// Brownian motion, so its covariance follows a `2d`-dimensional Lyapunov
/// equation started from `diag(0, S0/N)`. The result is exactly `c(t)/N`.
pub fn coupled_gap_path<T: Scalar>(
    spec: &LinearModelSpec<T>,
    n: usize,
    s0: &Matrix<T>,
    t_end: T,
    dt_ode: T,
) -> Result<MomentPath<T, T>, OracleError> {
    let d = spec.d();
    shape("S0", s0, d, d)?;
    if n == 0 {
        return Err(OracleError::InvalidArgument("N must be positive".into()));
    }
    let steps = grid_steps(t_end, dt_ode)?;
    let a = spec.a0.add(&spec.b1)?;
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut f = Matrix::zeros(2 * d, 2 * d);
    f.set_block(0, 0, &a);
    f.set_block(0, d, &spec.b2);
    f.set_block(d, d, &a.add(&spec.b2)?);
    let mut q = Matrix::zeros(2 * d, 2 * d);
    q.set_block(d, d, &spec.sigma_sq().scale(inv_n));
    let mut p0 = Matrix::zeros(2 * d, 2 * d);
    p0.set_block(d, d, &s0.scale(inv_n));
    let dd = 2 * d;
    let rhs = |y: &[T], out: &mut [T]| {
        lyap_into(&f, y, dd, out);
        for (o, v) in out.iter_mut().zip(q.as_slice()) {
            *o += *v;
        }
    };
    let gap = |y: &[T]| (0..d).map(|i| y[i * dd + i]).sum::<T>();
    let mut y = p0.as_slice().to_vec();
    let mut laws = Vec::with_capacity(steps + 1);
    laws.push(gap(&y));
    for _ in 0..steps {
        y = rk4_step(&y, dt_ode, &rhs);
        laws.push(gap(&y));
    }
    Ok(MomentPath { dt: dt_ode, laws })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChaosPoint<T> {
    pub n: usize,
    pub k: usize,
    /// `W2²` between the interacting k-marginal and the k-fold limit product.
    pub w2_sq: T,
    /// `Ent(interacting k-marginal | limit product)`.
    pub kl: T,
}

/// Exact chaos quantities at time `t` for each `N`, starting from i.i.d.
/// `N(m0, S0)` particles on both sides.
pub fn exact_chaos_curve<T: Scalar>(
    spec: &LinearModelSpec<T>,
    ns: &[usize],
    k: usize,
    t: T,
    m0: &[T],
    s0: &Matrix<T>,
    dt_ode: T,
) -> Result<Vec<ChaosPoint<T>>, OracleError> {
    let limit = propagate_limit_moments(spec, m0, s0, t, dt_ode)?;
    let product = product_law(limit.last(), k)?;
    ns.par_iter()
        .map(|&n| {
            let init = ExchangeableGaussian::independent(m0.to_vec(), s0.clone(), n)?;
            let path = propagate_interacting_moments(spec, &init, t, dt_ode)?;
            let marginal = k_marginal(path.last(), k)?;
            let w2 = gaussian_w2(&marginal, &product)?;
            Ok(ChaosPoint {
                n,
                k,
                w2_sq: w2 * w2,
                kl: gaussian_kl(&marginal, &product)?,
            })
        })
        .collect()
}
