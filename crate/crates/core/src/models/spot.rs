//! Random spot checks of declared regularity constants.
//!
//! Each declared inequality `lhs ≤ rhs` is evaluated on uniformly sampled
//! points (or grid segments) from the box `[−w, w]^D` and accepted with a
//! relative slack of 1e-8 plus an absolute slack of 1e-12.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, dist_sq, dot, Matrix};
use crate::measure::{MeasureSummary, SummaryNeeds};
use crate::scalar::Scalar;
use crate::segment::{SegmentCloud, SegmentView};

use super::{DelayModel, HamiltonianModel, MeanFieldModel, Regime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpotCheckConfig {
    pub samples: usize,
    /// Half-width `w` of the sampling box.
    pub half_width: f64,
    pub seed: u64,
    /// Grid points per sampled segment (delay and kinetic models).
    pub segment_points: usize,
    /// Atoms of the empirical measures used for the ellipticity check.
    pub measure_size: usize,
}

impl Default for SpotCheckConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            half_width: 5.0,
            seed: 0x5eed,
            segment_points: 5,
            measure_size: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InequalityCheck {
    pub name: String,
    pub samples: usize,
    pub violations: usize,
    /// Largest observed `lhs − rhs`.
    pub worst_excess: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpotCheckReport {
    pub checks: Vec<InequalityCheck>,
    pub passed: bool,
}

impl SpotCheckReport {
    fn new(checks: Vec<InequalityCheck>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }
}

pub(crate) fn within_tolerance(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + 1e-8 * lhs.abs().max(rhs.abs()) + 1e-12
}

struct Tally {
    name: &'static str,
    samples: usize,
    violations: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            samples: 0,
            violations: 0,
            worst: f64::NEG_INFINITY,
        }
    }

    fn record<T: Scalar>(&mut self, lhs: T, rhs: T) {
        let (l, r) = (lhs.to_f64_lossy(), rhs.to_f64_lossy());
        self.samples += 1;
        self.worst = self.worst.max(l - r);
        if !within_tolerance(l, r) || !l.is_finite() {
            self.violations += 1;
        }
    }

    fn finish(self) -> InequalityCheck {
        InequalityCheck {
            name: self.name.to_string(),
            samples: self.samples,
            violations: self.violations,
            worst_excess: self.worst,
            passed: self.violations == 0,
        }
    }
}

struct BoxSampler {
    rng: ChaCha8Rng,
    half: f64,
}

impl BoxSampler {
    fn new(cfg: &SpotCheckConfig, salt: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(salt);
        Self {
            rng,
            half: cfg.half_width,
        }
    }

    fn fill<T: Scalar>(&mut self, out: &mut [T]) {
        for v in out {
            let u = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            *v = T::lit(self.half * (2.0 * u - 1.0));
        }
    }

    fn vec<T: Scalar>(&mut self, len: usize) -> Vec<T> {
        let mut v = vec![T::zero(); len];
        self.fill(&mut v);
        v
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    linalg::norm_sq(v).sqrt()
}

fn dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    dist_sq(a, b).sqrt()
}

/// Checks the declared constants of a mean-field model.
pub fn spot_check_mean_field<T: Scalar>(model: &MeanFieldModel<T>, cfg: &SpotCheckConfig) -> SpotCheckReport {
    let d = model.d();
    let (rows, cols) = model.diffusion.sigma_tilde.shape(d);
    let t = T::zero();
    let mut s = BoxSampler::new(cfg, 1);
    let mut checks = Vec::new();

    let k_b1 = model.drift.k_b.max(model.drift.k2);
    let mut b1_lip = Tally::new("b1_lipschitz");
    let mut sig_lip = Tally::new("sigma_tilde_lipschitz");
    let mut sig_sq = Tally::new("sigma_tilde_squared_lipschitz");
    let mut diss = Tally::new("b0_dissipativity");
    let (mut o1, mut o2) = (vec![T::zero(); d], vec![T::zero(); d]);
    let (mut m1, mut m2) = (vec![T::zero(); rows * cols], vec![T::zero(); rows * cols]);
    for _ in 0..cfg.samples {
        let (x, xt, y, yt) = (s.vec::<T>(d), s.vec::<T>(d), s.vec::<T>(d), s.vec::<T>(d));
        let dx = dist(&x, &xt);
        let dy = dist(&y, &yt);

        model.drift.b1.eval(t, &x, &y, &mut o1);
        model.drift.b1.eval(t, &xt, &yt, &mut o2);
        b1_lip.record(dist(&o1, &o2), k_b1 * (dx + dy));

        model.diffusion.sigma_tilde.eval(t, &x, &y, &mut m1);
        model.diffusion.sigma_tilde.eval(t, &xt, &yt, &mut m2);
        let hs_sq = dist_sq(&m1, &m2);
        sig_lip.record(hs_sq.sqrt(), model.diffusion.k_sigma * (dx + dy));
        if model.regime == Regime::Dissipative {
            sig_sq.record(hs_sq, model.drift.k2 * (dx * dx + dy * dy));
        }

        if model.drift.k1 > T::zero() {
            model.drift.b0.eval(t, &x, &mut o1);
            model.drift.b0.eval(t, &xt, &mut o2);
            let db: Vec<T> = o1.iter().zip(&o2).map(|(a, b)| *a - *b).collect();
            let dv: Vec<T> = x.iter().zip(&xt).map(|(a, b)| *a - *b).collect();
            diss.record(T::lit(2.0) * dot(&db, &dv), -model.drift.k1 * dx * dx);
        }
    }
    checks.push(b1_lip.finish());
    checks.push(sig_lip.finish());
    if model.regime == Regime::Dissipative {
        checks.push(sig_sq.finish());
    }
    if model.drift.k1 > T::zero() {
        checks.push(diss.finish());
    }

    if let Some(delta) = model.diffusion.delta {
        // σ(x, μ̂) at sampled empirical measures
        let mut lower = Tally::new("ellipticity_lower");
        let mut upper = Tally::new("ellipticity_upper");
        let atoms = cfg.measure_size.max(1);
        let mut sigma = vec![T::zero(); rows * cols];
        for _ in 0..cfg.samples {
            let x = s.vec::<T>(d);
            let pts = s.vec::<T>(atoms * d);
            let cloud = SegmentCloud::ring(&pts, d, 0, atoms, 0);
            let mu = MeasureSummary::empirical(cloud, model.diffusion.sigma_tilde.needs().union(SummaryNeeds {
                means: true,
                cloud: true,
                exp2: false,
            }));
            model.diffusion.sigma_tilde.average(t, &x, &mu, &mut sigma);
            let sm = Matrix::from_vec(rows, cols, sigma.clone());
            let sst = sm.matmul(&sm.transpose()).expect("square product");
            match linalg::sym_eigen(&sst) {
                Ok((vals, _)) => {
                    lower.record(T::one() / delta, vals[0]);
                    upper.record(vals[vals.len() - 1], delta);
                }
                Err(_) => {
                    lower.record(T::one(), T::zero());
                    upper.record(T::one(), T::zero());
                }
            }
        }
        checks.push(lower.finish());
        checks.push(upper.finish());
    }
    SpotCheckReport::new(checks)
}

fn segment_sup_dist<T: Scalar>(a: &SegmentView<'_, T>, b: &SegmentView<'_, T>) -> T {
    a.sup_dist_sq(b).sqrt()
}

/// Checks the declared constants of a delay model on random grid segments.
pub fn spot_check_delay<T: Scalar>(model: &DelayModel<T>, cfg: &SpotCheckConfig) -> SpotCheckReport {
    let d = model.d();
    let (rows, cols) = model.sigma_tilde.shape(d);
    let pts = cfg.segment_points.max(1);
    let t = T::zero();
    let mut s = BoxSampler::new(cfg, 2);
    let mut sig = Tally::new("sigma_tilde_squared_lipschitz");
    let mut diss = Tally::new("b_dissipativity");
    let mut bt = Tally::new("b_tilde_lipschitz");
    let (mut o1, mut o2) = (vec![T::zero(); d], vec![T::zero(); d]);
    let (mut m1, mut m2) = (vec![T::zero(); rows * cols], vec![T::zero(); rows * cols]);
    for _ in 0..cfg.samples {
        let raw: Vec<Vec<T>> = (0..4).map(|_| s.vec::<T>(pts * d)).collect();
        let xi = SegmentView::from_oldest_first(&raw[0], d);
        let xit = SegmentView::from_oldest_first(&raw[1], d);
        let eta = SegmentView::from_oldest_first(&raw[2], d);
        let etat = SegmentView::from_oldest_first(&raw[3], d);
        let dxi = segment_sup_dist(&xi, &xit);
        let deta = segment_sup_dist(&eta, &etat);

        model.sigma_tilde.eval(t, &xi, &eta, &mut m1);
        model.sigma_tilde.eval(t, &xit, &etat, &mut m2);
        sig.record(dist_sq(&m1, &m2), model.k_sigma * (dxi * dxi + deta * deta));

        model.b_tilde.eval(t, &xi, &eta, &mut o1);
        model.b_tilde.eval(t, &xit, &etat, &mut o2);
        bt.record(dist(&o1, &o2), model.k_b_tilde * (dxi + deta));

        let (x, y) = (xi.head(), xit.head());
        model.b.eval(t, x, &mut o1);
        model.b.eval(t, y, &mut o2);
        let db: Vec<T> = o1.iter().zip(&o2).map(|(a, b)| *a - *b).collect();
        let dv: Vec<T> = x.iter().zip(y).map(|(a, b)| *a - *b).collect();
        diss.record(T::lit(2.0) * dot(&db, &dv), -model.k_b * linalg::norm_sq(&dv));
    }
    SpotCheckReport::new(vec![sig.finish(), diss.finish(), bt.finish()])
}

/// Checks the declared constants of a kinetic model.
pub fn spot_check_hamiltonian<T: Scalar>(model: &HamiltonianModel<T>, cfg: &SpotCheckConfig) -> SpotCheckReport {
    let (m, d) = (model.m(), model.d());
    let pts = cfg.segment_points.max(1);
    let t = T::zero();
    let mut s = BoxSampler::new(cfg, 3);
    let mut diss = Tally::new("b_dissipativity");
    let mut lip = Tally::new("b_lipschitz");
    let mut a_diss = Tally::new("a_dissipativity");
    let mut bt = Tally::new("b_tilde_lipschitz");
    let (mut o1, mut o2) = (vec![T::zero(); d], vec![T::zero(); d]);
    let mut av = vec![T::zero(); m];
    for _ in 0..cfg.samples {
        let (y, yt) = (s.vec::<T>(d), s.vec::<T>(d));
        model.b.eval(t, &y, &mut o1);
        model.b.eval(t, &yt, &mut o2);
        let db: Vec<T> = o1.iter().zip(&o2).map(|(a, b)| *a - *b).collect();
        let dv: Vec<T> = y.iter().zip(&yt).map(|(a, b)| *a - *b).collect();
        let dn = norm(&dv);
        diss.record(T::lit(2.0) * dot(&db, &dv), -model.k1 * dn * dn);
        lip.record(norm(&db), model.k2 * dn);

        let v = s.vec::<T>(m);
        model.a.mul_vec_into(&v, &mut av);
        a_diss.record(T::lit(2.0) * dot(&av, &v), -model.k_a * linalg::norm_sq(&v));

        let raw: Vec<Vec<T>> = (0..4).map(|_| s.vec::<T>(pts * (m + d))).collect();
        let xi = SegmentView::from_oldest_first(&raw[0], m + d);
        let xit = SegmentView::from_oldest_first(&raw[1], m + d);
        let eta = SegmentView::from_oldest_first(&raw[2], m + d);
        let etat = SegmentView::from_oldest_first(&raw[3], m + d);
        model.b_tilde.eval(t, &xi, &eta, &mut o1);
        model.b_tilde.eval(t, &xit, &etat, &mut o2);
        bt.record(
            dist(&o1, &o2),
            model.k_b_tilde * (segment_sup_dist(&xi, &xit) + segment_sup_dist(&eta, &etat)),
        );
    }
    SpotCheckReport::new(vec![diss.finish(), lip.finish(), a_diss.finish(), bt.finish()])
}
