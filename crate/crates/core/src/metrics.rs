//! Distances and functionals between empirical and Gaussian laws.
//!
//! Total variation follows the convention `‖γ − γ̃‖_var = sup_{‖f‖∞ ≤ 1} |γ(f) − γ̃(f)|`,
//! which equals `∫|p − q|` for densities (twice the probabilists' value).

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, dist_sq, LinalgError, Matrix};
use crate::noise::NoisePlan;
use crate::scalar::Scalar;
use crate::stats::Estimate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("Sinkhorn did not converge after {iterations} iterations (marginal residual {residual:e})")]
    SinkhornNotConverged { iterations: usize, residual: f64 },
    #[error("relative entropy is infinite: target covariance is singular")]
    InfiniteEntropy,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Equal-weight empirical measure on `len` points of `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud<T> {
    dim: usize,
    points: Vec<T>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<T>, dim: usize) -> Result<Self, MetricsError> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(MetricsError::InvalidCloud(format!(
                "{} values do not form a nonempty cloud of dimension {dim}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().position(|v| !v.is_finite()) {
            return Err(MetricsError::InvalidCloud(format!("non-finite entry at index {p}")));
        }
        Ok(Self { dim, points })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.points
    }
}

fn check_same_shape<T: Scalar>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<(), MetricsError> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(MetricsError::SizeMismatch(format!(
            "{}x{} vs {}x{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    Ok(())
}

fn cost_matrix<T: Scalar>(a: &PointCloud<T>, b: &PointCloud<T>) -> Vec<T> {
    let n = a.len();
    let mut c = vec![T::zero(); n * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = dist_sq(a.point(i), b.point(j));
        }
    });
    c
}

/// Minimum-cost perfect matching on a dense `n × n` cost matrix.
///
/// Shortest augmenting paths with dual potentials (Hungarian method),
/// `O(n³)`. Returns `assignment[row] = col`.
pub fn solve_assignment<T: Scalar>(cost: &[T], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = T::infinity();
    // 1-based arrays with a sentinel column 0
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Exact `W2` between equal-size equal-weight clouds via optimal assignment.
pub fn w2_exact<T: Scalar>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T, MetricsError> {
    check_same_shape(a, b)?;
    let n = a.len();
    let cost = cost_matrix(a, b);
    let assignment = solve_assignment(&cost, n);
    // summing the matched costs in sorted order makes the value exactly symmetric in (a, b)
    let mut matched: Vec<T> = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).collect();
    matched.sort_by(|x, y| x.partial_cmp(y).expect("finite costs"));
    let total = matched.into_iter().fold(T::zero(), |acc, c| acc + c);
    Ok((total / T::from_usize_lossy(n)).max(T::zero()).sqrt())
}

/// `√((1/N) Σ |a_i − b_i|²)`: the cost of the index pairing, an upper bound for [`w2_exact`].
pub fn w2_pairing_bound<T: Scalar>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T, MetricsError> {
    check_same_shape(a, b)?;
    let s = (0..a.len()).fold(T::zero(), |acc, i| acc + dist_sq(a.point(i), b.point(i)));
    Ok((s / T::from_usize_lossy(a.len())).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SinkhornResult<T> {
    /// `√⟨P, C⟩` under the final entropic plan.
    pub w2: T,
    pub iterations: usize,
    /// `Σ_i |Σ_j P_ij − 1/N|` at termination.
    pub residual: T,
}

fn log_sum_exp<T: Scalar>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + vals.fold(T::zero(), |acc, v| acc + (v - m).exp()).ln()
}

/// Sinkhorn state: dual potentials plus the cost in both orientations.
struct Sinkhorn<'c, T> {
    n: usize,
    cost: &'c [T],
    cost_t: Vec<T>,
    log_w: T,
    f: Vec<T>,
    g: Vec<T>,
}

/// Scalings larger than `e^{ABSORB}` are folded back into the potentials.
const ABSORB: f64 = 30.0;

impl<T: Scalar> Sinkhorn<'_, T> {
    /// One exact log-domain half step: `pot_i = ε log w − ε LSE_j((other_j − C_ij)/ε)`.
    fn log_update(pot: &mut [T], other: &[T], c: &[T], n: usize, log_w: T, e: T) {
        pot.par_iter_mut().enumerate().for_each(|(i, p)| {
            let row = &c[i * n..(i + 1) * n];
            let lse = log_sum_exp(other.iter().zip(row).map(|(&o, &cij)| (o - cij) / e));
            *p = e * log_w - e * lse;
        });
    }

    fn kernel(&self, c: &[T], rows: &[T], cols: &[T], e: T) -> Vec<T> {
        let n = self.n;
        let mut k = vec![T::zero(); n * n];
        k.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
            let row = &c[i * n..(i + 1) * n];
            for ((o, &cij), &gj) in out.iter_mut().zip(row).zip(cols) {
                *o = ((rows[i] + gj - cij) / e).exp();
            }
        });
        k
    }

    /// `Σ_i |Σ_j P_ij − 1/N|` for the plan of the current potentials.
    fn residual(&self, e: T) -> T {
        let n = self.n;
        let w = self.log_w.exp();
        (0..n)
            .map(|i| {
                let row = &self.cost[i * n..(i + 1) * n];
                let s = self
                    .g
                    .iter()
                    .zip(row)
                    .fold(T::zero(), |acc, (&gj, &cij)| acc + ((self.f[i] + gj - cij) / e).exp());
                (s - w).abs()
            })
            .fold(T::zero(), |acc, r| acc + r)
    }

    /// Runs at regularization `e` until the row residual drops below `tol`
    /// (checked every ten iterations) or `max_iter` iterations are spent.
    ///
    /// Iterates multiplicatively on a cached Gibbs kernel and absorbs the
    /// scalings into the potentials whenever they grow large.
    fn run(&mut self, e: T, max_iter: usize, tol: Option<T>) -> (usize, T) {
        let n = self.n;
        let w = self.log_w.exp();
        let bound = T::lit(ABSORB);
        let mut iterations = 0;
        while iterations < max_iter {
            Self::log_update(&mut self.f, &self.g, self.cost, n, self.log_w, e);
            Self::log_update(&mut self.g, &self.f, &self.cost_t, n, self.log_w, e);
            iterations += 1;
            let k = self.kernel(self.cost, &self.f, &self.g, e);
            let k_t = self.kernel(&self.cost_t, &self.g, &self.f, e);
            let mut u = vec![T::one(); n];
            let mut v = vec![T::one(); n];
            let mut stop = false;
            loop {
                if iterations >= max_iter {
                    stop = true;
                    break;
                }
                iterations += 1;
                for (i, ui) in u.iter_mut().enumerate() {
                    *ui = w / linalg::dot(&k[i * n..(i + 1) * n], &v);
                }
                for (j, vj) in v.iter_mut().enumerate() {
                    *vj = w / linalg::dot(&k_t[j * n..(j + 1) * n], &u);
                }
                let blown = u.iter().chain(&v).any(|x| !x.is_finite() || x.ln().abs() > bound);
                if blown {
                    // discard this round; the log-domain step above restabilizes
                    if u.iter().chain(&v).all(|x| x.is_finite() && *x > T::zero()) {
                        self.absorb(&u, &v, e);
                    }
                    break;
                }
                if let Some(tol) = tol {
                    if iterations % 10 == 0 {
                        let res = (0..n).fold(T::zero(), |acc, i| {
                            acc + (u[i] * linalg::dot(&k[i * n..(i + 1) * n], &v) - w).abs()
                        });
                        if res < tol {
                            stop = true;
                            break;
                        }
                    }
                }
            }
            if stop {
                self.absorb(&u, &v, e);
                let res = self.residual(e);
                if tol.map_or(true, |t| res < t) || iterations >= max_iter {
                    return (iterations, res);
                }
            }
        }
        (iterations, self.residual(e))
    }

    fn absorb(&mut self, u: &[T], v: &[T], e: T) {
        for (f, ui) in self.f.iter_mut().zip(u) {
            *f += e * ui.ln();
        }
        for (g, vj) in self.g.iter_mut().zip(v) {
            *g += e * vj.ln();
        }
    }
}

/// Entropic optimal transport with ε-scaling.
///
/// The regularization starts at the largest cost and is halved until it
/// reaches `eps`; iterations at the final `eps` stop once the row-marginal
/// violation `Σ_i |Σ_j P_ij − 1/N|` drops below `tol`. The reported value
/// `√⟨P, C⟩` approaches [`w2_exact`] from above as `eps → 0`.
pub fn w2_sinkhorn<T: Scalar>(
    a: &PointCloud<T>,
    b: &PointCloud<T>,
    eps: T,
    max_iter: usize,
    tol: T,
) -> Result<SinkhornResult<T>, MetricsError> {
    check_same_shape(a, b)?;
    if !(eps > T::zero()) {
        return Err(MetricsError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let n = a.len();
    let cost = cost_matrix(a, b);
    let mut state = Sinkhorn {
        n,
        cost: &cost,
        cost_t: (0..n * n).map(|k| cost[(k % n) * n + k / n]).collect(),
        log_w: -T::from_usize_lossy(n).ln(),
        f: vec![T::zero(); n],
        g: vec![T::zero(); n],
    };

    let c_max = cost.iter().copied().fold(T::zero(), T::max);
    let mut e = c_max.max(eps);
    while e > eps {
        state.run(e, 20, None);
        e = e / T::lit(2.0);
    }
    let (iterations, residual) = state.run(eps, max_iter, Some(tol));
    if !(residual < tol) {
        return Err(MetricsError::SinkhornNotConverged {
            iterations,
            residual: residual.to_f64_lossy(),
        });
    }
    let total = (0..n).fold(T::zero(), |acc, i| {
        let row = &cost[i * n..(i + 1) * n];
        acc + state
            .g
            .iter()
            .zip(row)
            .fold(T::zero(), |s, (&gj, &cij)| s + ((state.f[i] + gj - cij) / eps).exp() * cij)
    });
    Ok(SinkhornResult {
        w2: total.max(T::zero()).sqrt(),
        iterations,
        residual,
    })
}

/// `(k/N) · full_sq`: the k-marginal share of an exchangeable N-particle bound.
pub fn marginal_chaos_bound<T: Scalar>(full_sq: T, k: usize, n: usize) -> Result<T, MetricsError> {
    if k == 0 || k > n {
        return Err(MetricsError::InvalidArgument(format!("need 1 <= k <= N, got k={k}, N={n}")));
    }
    Ok(T::from_usize_lossy(k) / T::from_usize_lossy(n) * full_sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLaw<T> {
    mean: Vec<T>,
    cov: Matrix<T>,
}

impl<T: Scalar> GaussianLaw<T> {
    /// Validates symmetry (1e-12) and positive semidefiniteness (eigenvalues ≥ −1e-10).
    pub fn new(mean: Vec<T>, cov: Matrix<T>) -> Result<Self, MetricsError> {
        if !cov.is_square() || cov.rows() != mean.len() {
            return Err(MetricsError::SizeMismatch(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        let scale = cov.max_abs().max(T::one());
        let asym = cov.asymmetry();
        if asym > T::lit(1e-12) * scale {
            return Err(LinalgError::NotSymmetric(asym.to_f64_lossy()).into());
        }
        let cov = cov.symmetric_part();
        let (vals, _) = linalg::sym_eigen(&cov)?;
        if let Some(&lo) = vals.first() {
            if lo < -T::lit(1e-10) {
                return Err(LinalgError::NotPsd(lo.to_f64_lossy()).into());
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix<T> {
        &self.cov
    }
}

fn check_same_dim<T: Scalar>(a: &GaussianLaw<T>, b: &GaussianLaw<T>) -> Result<(), MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::SizeMismatch(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Closed-form `W2` between Gaussian laws.
pub fn gaussian_w2<T: Scalar>(g1: &GaussianLaw<T>, g2: &GaussianLaw<T>) -> Result<T, MetricsError> {
    check_same_dim(g1, g2)?;
    let clip = T::lit(1e-10);
    let s2h = linalg::sqrt_psd(&g2.cov, clip)?;
    let inner = s2h.matmul(&g1.cov)?.matmul(&s2h)?.symmetric_part();
    let cross = linalg::sqrt_psd(&inner, clip)?;
    let tr = g1.cov.trace() + g2.cov.trace() - T::lit(2.0) * cross.trace();
    let m = dist_sq(&g1.mean, &g2.mean);
    Ok((m + tr).max(T::zero()).sqrt())
}

/// `Ent(from | to)` between Gaussian laws.
pub fn gaussian_kl<T: Scalar>(from: &GaussianLaw<T>, to: &GaussianLaw<T>) -> Result<T, MetricsError> {
    check_same_dim(from, to)?;
    let dim = from.dim();
    let log_det_to = match linalg::log_det_spd(&to.cov) {
        Ok(v) => v,
        Err(LinalgError::NotPositiveDefinite) => return Err(MetricsError::InfiniteEntropy),
        Err(e) => return Err(e.into()),
    };
    let log_det_from = match linalg::log_det_spd(&from.cov) {
        Ok(v) => v,
        // a degenerate law has no density with respect to a nondegenerate one
        Err(LinalgError::NotPositiveDefinite) => return Ok(T::infinity()),
        Err(e) => return Err(e.into()),
    };
    let solved = linalg::solve_spd(&to.cov, &from.cov)?;
    let diff: Vec<T> = to.mean.iter().zip(&from.mean).map(|(a, b)| *a - *b).collect();
    let rhs = Matrix::from_vec(dim, 1, diff.clone());
    let w = linalg::solve_spd(&to.cov, &rhs)?;
    let quad = linalg::dot(&diff, w.as_slice());
    let kl = T::lit(0.5) * (solved.trace() + quad - T::from_usize_lossy(dim) + log_det_to - log_det_from);
    Ok(kl.max(T::zero()))
}

/// Pinsker: `‖·‖_var ≤ √(2 Ent)` in the `∫|p − q|` convention.
pub fn pinsker_tv_bound<T: Scalar>(ent: T) -> T {
    (T::lit(2.0) * ent).sqrt()
}

/// Monte Carlo estimate of `E|(1/N) Σ_{m=1}^N h(Z_1, Z_m) − ∫ h(Z_1, y) L(dy)|²`.
///
/// Each trial draws `N` i.i.d. samples (the sum includes `m = 1`) from its
/// own generator stream, so the estimate is independent of thread count.
/// `conditional(z)` must return `∫ h(z, y) L(dy)` exactly or to declared accuracy.
pub fn lln_gap<Z, S, H, E>(h: H, conditional: E, sampler: S, n: usize, trials: usize, seed: u64) -> Estimate
where
    Z: Send,
    S: Fn(&mut ChaCha8Rng) -> Z + Sync,
    H: Fn(&Z, &Z) -> f64 + Sync,
    E: Fn(&Z) -> f64 + Sync,
{
    assert!(n >= 1 && trials >= 2);
    let plan = NoisePlan::new(seed);
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = plan.rng(trial);
            let z1 = sampler(&mut rng);
            let mut sum = h(&z1, &z1);
            for _ in 1..n {
                let z = sampler(&mut rng);
                sum += h(&z1, &z);
            }
            let gap = sum / n as f64 - conditional(&z1);
            gap * gap
        })
        .collect();
    Estimate::from_samples(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{normal_pair, unit_f64};
    use proptest::prelude::*;
    use rand_chacha::rand_core::RngCore;

    fn cloud(v: &[f64], dim: usize) -> PointCloud<f64> {
        PointCloud::new(v.to_vec(), dim).unwrap()
    }

    fn brute_force_w2(a: &PointCloud<f64>, b: &PointCloud<f64>) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, a: &PointCloud<f64>, b: &PointCloud<f64>, best: &mut f64) {
            let n = perm.len();
            if k == n {
                let c: f64 = (0..n).map(|i| dist_sq(a.point(i), b.point(perm[i]))).sum();
                *best = best.min(c);
                return;
            }
            for j in k..n {
                perm.swap(k, j);
                permute(k + 1, perm, a, b, best);
                perm.swap(k, j);
            }
        }
        let mut perm: Vec<usize> = (0..a.len()).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut perm, a, b, &mut best);
        (best / a.len() as f64).sqrt()
    }

    #[test]
    fn w2_examples() {
        let a = cloud(&[0.0, 2.0], 1);
        assert_eq!(w2_exact(&a, &a).unwrap(), 0.0);
        assert_eq!(w2_exact(&cloud(&[0.0, 1.0], 1), &cloud(&[1.0, 0.0], 1)).unwrap(), 0.0);
        assert!((w2_exact(&a, &cloud(&[1.0, 3.0], 1)).unwrap() - 1.0).abs() < 1e-15);
        assert!(w2_exact(&a, &cloud(&[1.0], 1)).is_err());
    }

    #[test]
    fn pairing_examples() {
        let a = cloud(&[0.0, 2.0], 1);
        assert_eq!(w2_pairing_bound(&a, &a).unwrap(), 0.0);
        assert_eq!(w2_pairing_bound(&a, &cloud(&[1.0, 3.0], 1)).unwrap(), 1.0);
        let (x, y) = (cloud(&[0.0, 1.0], 1), cloud(&[1.0, 0.0], 1));
        assert_eq!(w2_pairing_bound(&x, &y).unwrap(), 1.0);
        assert_eq!(w2_exact(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn sinkhorn_examples() {
        let a = cloud(&[0.0, 2.0], 1);
        let r = w2_sinkhorn(&a, &a, 1e-3, 10_000, 1e-9).unwrap();
        assert!(r.w2 <= 1e-3);
        let r = w2_sinkhorn(&a, &cloud(&[1.0, 3.0], 1), 1e-3, 10_000, 1e-9).unwrap();
        assert!((r.w2 - 1.0).abs() < 1e-2);
        assert!(matches!(
            w2_sinkhorn(&a, &a, 0.0, 10, 1e-9),
            Err(MetricsError::InvalidArgument(_))
        ));
        assert!(matches!(
            w2_sinkhorn(&cloud(&[0.0, 1.0, 5.0], 1), &cloud(&[0.3, 2.0, 4.0], 1), 1e-3, 1, 1e-300),
            Err(MetricsError::SinkhornNotConverged { .. })
        ));
    }

    #[test]
    fn marginal_bound_examples() {
        assert_eq!(marginal_chaos_bound(7.0, 5, 5).unwrap(), 7.0);
        assert!((marginal_chaos_bound(5.0f64, 1, 100).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(marginal_chaos_bound(4.0, 3, 12).unwrap(), 1.0);
        assert!(marginal_chaos_bound(4.0, 13, 12).is_err());
        assert!(marginal_chaos_bound(4.0, 0, 12).is_err());
    }

    fn g1(m: f64, v: f64) -> GaussianLaw<f64> {
        GaussianLaw::new(vec![m], Matrix::from_vec(1, 1, vec![v])).unwrap()
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_w2(&g1(0.0, 1.0), &g1(0.0, 1.0)).unwrap(), 0.0);
        assert!((gaussian_w2(&g1(0.0, 1.0), &g1(3.0, 1.0)).unwrap() - 3.0).abs() < 1e-12);
        assert!((gaussian_w2(&g1(0.0, 1.0), &g1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(gaussian_kl(&g1(0.0, 1.0), &g1(0.0, 1.0)).unwrap(), 0.0);
        assert!((gaussian_kl(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-14);
        let expect = 0.5 * (2.0 - 1.0 - 2.0f64.ln());
        assert!((gaussian_kl(&g1(0.0, 2.0), &g1(0.0, 1.0)).unwrap() - expect).abs() < 1e-14);
        assert!((expect - 0.153_426_4).abs() < 1e-7);
        assert_eq!(gaussian_kl(&g1(0.0, 1.0), &g1(0.0, 0.0)), Err(MetricsError::InfiniteEntropy));
        assert_eq!(gaussian_kl(&g1(0.0, 0.0), &g1(0.0, 1.0)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn gaussian_law_validation() {
        let asym = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianLaw::new(vec![0.0; 2], asym).is_err());
        let neg = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, -1e-6]);
        assert!(GaussianLaw::new(vec![0.0; 2], neg).is_err());
        let tiny = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, -1e-12]);
        let g = GaussianLaw::new(vec![0.0; 2], tiny).unwrap();
        assert!(gaussian_w2(&g, &g).unwrap() < 1e-5);
        assert!(GaussianLaw::new(vec![0.0; 3], Matrix::identity(2)).is_err());
    }

    /// `∫|p − q|` for 1-d densities on a fine midpoint grid.
    fn tv_quadrature(p: impl Fn(f64) -> f64, q: impl Fn(f64) -> f64) -> f64 {
        let (lo, hi, n) = (-12.0, 12.0, 200_000);
        let h = (hi - lo) / n as f64;
        (0..n)
            .map(|k| {
                let x = lo + (k as f64 + 0.5) * h;
                (p(x) - q(x)).abs() * h
            })
            .sum()
    }

    #[test]
    fn pinsker_examples() {
        assert_eq!(pinsker_tv_bound(0.0), 0.0);
        assert_eq!(pinsker_tv_bound(0.5), 1.0);
        let pdf = |m: f64| move |x: f64| (-(x - m) * (x - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let tv = tv_quadrature(pdf(0.0), pdf(0.1));
        let ent = gaussian_kl(&g1(0.1, 1.0), &g1(0.0, 1.0)).unwrap();
        assert!((ent - 0.005).abs() < 1e-15);
        assert!(tv <= pinsker_tv_bound(ent));
        assert!((pinsker_tv_bound(ent) - 0.1).abs() < 1e-12);
        // ∫|p − q| for a 0.1 mean shift is 2(2Φ(0.05) − 1) ≈ 0.07976
        assert!((tv - 0.079_755_2).abs() < 1e-6);
    }

    #[test]
    fn lln_examples() {
        let bern = |rng: &mut ChaCha8Rng| (rng.next_u32() & 1) as f64;
        let e = lln_gap(|v, _| *v, |z| *z, bern, 16, 1000, 1);
        assert_eq!(e.mean, 0.0);
        let e = lln_gap(|_, _| 3.0, |_| 3.0, bern, 16, 1000, 1);
        assert_eq!(e.mean, 0.0);
        let n = 64;
        let e = lln_gap(|_, w| *w, |_| 0.5, bern, n, 20_000, 5);
        let exact = 1.0 / (4.0 * n as f64);
        assert!(e.covers(exact), "{e:?} vs {exact}");
    }

    #[test]
    fn lln_product_kernel_self_term() {
        // h(v, w) = v w with Z ~ N(0, 1): N E|gap|² = E[Z⁴]/N + (N − 1)/N = 1 + 2/N
        let normal = |rng: &mut ChaCha8Rng| normal_pair(rng).0;
        let n = 50;
        let e = lln_gap(|v, w| v * w, |_| 0.0, normal, n, 40_000, 9);
        let exact = (1.0 + 2.0 / n as f64) / n as f64;
        assert!((e.mean - exact).abs() < 4.0 * e.std_err, "{e:?} vs {exact}");
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize, shift: f64) -> PointCloud<f64> {
        let pts: Vec<f64> = (0..n * dim).map(|_| normal_pair(rng).0 + shift).collect();
        PointCloud::new(pts, dim).unwrap()
    }

    #[test]
    fn brute_force_agreement_small_n() {
        let plan = NoisePlan::new(8);
        for inst in 0..100 {
            let mut rng = plan.rng(inst);
            let n = 1 + (rng.next_u32() % 7) as usize;
            let dim = 1 + (rng.next_u32() % 3) as usize;
            let a = random_cloud(&mut rng, n, dim, 0.0);
            let b = random_cloud(&mut rng, n, dim, 0.5);
            let exact = w2_exact(&a, &b).unwrap();
            assert!((exact - brute_force_w2(&a, &b)).abs() < 1e-12);
            assert!(exact <= w2_pairing_bound(&a, &b).unwrap() + 1e-12);
        }
    }

    #[test]
    fn sinkhorn_close_to_exact() {
        let plan = NoisePlan::new(21);
        for inst in 0..3 {
            let mut rng = plan.rng(inst);
            let a = random_cloud(&mut rng, 200, 2, 0.0);
            let b = random_cloud(&mut rng, 200, 2, 1.0);
            let exact = w2_exact(&a, &b).unwrap();
            let s = w2_sinkhorn(&a, &b, 1e-2, 20_000, 1e-4).unwrap();
            assert!((s.w2 - exact).abs() / exact < 0.05, "{} vs {exact}", s.w2);
            assert!(s.w2 >= exact * (1.0 - 1e-6));
        }
    }

    #[test]
    fn f32_agrees_with_f64() {
        let a = PointCloud::new(vec![0.0f32, 2.0, 5.0], 1).unwrap();
        let b = PointCloud::new(vec![1.0f32, 3.0, 4.5], 1).unwrap();
        let a64 = cloud(&[0.0, 2.0, 5.0], 1);
        let b64 = cloud(&[1.0, 3.0, 4.5], 1);
        let d32 = w2_exact(&a, &b).unwrap() as f64;
        assert!((d32 - w2_exact(&a64, &b64).unwrap()).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn w2_metric_axioms(seed in 0u64..10_000, n in 1usize..12, dim in 1usize..4) {
            let mut rng = NoisePlan::new(seed).rng(0);
            let a = random_cloud(&mut rng, n, dim, 0.0);
            let b = random_cloud(&mut rng, n, dim, 0.3);
            let c = random_cloud(&mut rng, n, dim, -0.2);
            let ab = w2_exact(&a, &b).unwrap();
            prop_assert_eq!(ab, w2_exact(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(w2_exact(&a, &a).unwrap(), 0.0);
            let ac = w2_exact(&a, &c).unwrap();
            let cb = w2_exact(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
            prop_assert!(ab <= w2_pairing_bound(&a, &b).unwrap() + 1e-12);
        }

        #[test]
        fn one_dimensional_sorted_pairing_is_optimal(seed in 0u64..10_000, n in 1usize..40) {
            let mut rng = NoisePlan::new(seed).rng(1);
            let mut a: Vec<f64> = (0..n).map(|_| normal_pair(&mut rng).0).collect();
            let mut b: Vec<f64> = (0..n).map(|_| 2.0 * unit_f64(rng.next_u64())).collect();
            let exact = w2_exact(&cloud(&a, 1), &cloud(&b, 1)).unwrap();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let sorted = w2_pairing_bound(&cloud(&a, 1), &cloud(&b, 1)).unwrap();
            prop_assert!((exact - sorted).abs() <= 1e-12 * sorted.max(1.0));
        }

        #[test]
        fn gaussian_kl_nonnegative_and_w2_metric(seed in 0u64..10_000, dim in 1usize..4) {
            let mut rng = NoisePlan::new(seed).rng(2);
            let law = |rng: &mut ChaCha8Rng| {
                let l = Matrix::from_vec(dim, dim, (0..dim * dim).map(|_| normal_pair(rng).0).collect());
                let cov = l.matmul(&l.transpose()).unwrap().add(&Matrix::identity(dim).scale(0.1)).unwrap();
                let mean = (0..dim).map(|_| normal_pair(rng).0).collect();
                GaussianLaw::new(mean, cov.symmetric_part()).unwrap()
            };
            let (p, q, r) = (law(&mut rng), law(&mut rng), law(&mut rng));
            prop_assert!(gaussian_kl(&p, &q).unwrap() > 0.0);
            prop_assert!(gaussian_kl(&p, &p).unwrap() < 1e-10);
            let pq = gaussian_w2(&p, &q).unwrap();
            prop_assert!((pq - gaussian_w2(&q, &p).unwrap()).abs() < 1e-8);
            prop_assert!(gaussian_w2(&p, &p).unwrap() < 1e-6);
            prop_assert!(pq <= gaussian_w2(&p, &r).unwrap() + gaussian_w2(&r, &q).unwrap() + 1e-8);
        }
    }
}
