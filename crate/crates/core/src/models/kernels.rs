//! Built-in and user-defined coefficient kernels.
//!
//! Each kernel can be evaluated pointwise and averaged against a
//! [`MeasureSummary`]. Averages always include every point of the measure,
//! so an empirical measure's average over its own particles includes the
//! self term.

use std::fmt;
use std::sync::Arc;

use crate::linalg::Matrix;
use crate::measure::{MeasureSummary, SummaryNeeds};
use crate::scalar::Scalar;
use crate::segment::SegmentView;

/// `(t, x, out)` with `out ← f(t, x)`.
pub type PointFn<T> = Arc<dyn Fn(T, &[T], &mut [T]) + Send + Sync>;
/// `(t, x, y, out)` with `out ← k(t, x, y)`; matrices are written row-major.
pub type PairFn<T> = Arc<dyn Fn(T, &[T], &[T], &mut [T]) + Send + Sync>;
/// `(t, ξ, η, out)` on path segments.
pub type SegmentPairFn<T> = Arc<dyn Fn(T, &SegmentView<'_, T>, &SegmentView<'_, T>, &mut [T]) + Send + Sync>;

/// Measure-independent drift `b⁽⁰⁾(x)`.
#[derive(Clone)]
pub enum SelfDrift<T> {
    /// `A x + c`.
    Affine { a: Matrix<T>, c: Vec<T> },
    Custom(PointFn<T>),
}

/// Interaction drift `b⁽¹⁾(x, y)`.
#[derive(Clone)]
pub enum PairDrift<T> {
    Zero,
    /// `B₁ x + B₂ y + c`.
    Affine { on_x: Matrix<T>, on_y: Matrix<T>, c: Vec<T> },
    /// `scale · tanh(y − x)` componentwise.
    TanhDifference { scale: T },
    Custom(PairFn<T>),
}

/// Diffusion kernel `σ̃(x, y)`, a `d × n` matrix.
#[derive(Clone)]
pub enum PairDiffusion<T> {
    Constant(Matrix<T>),
    /// `diag(base + scale · tanh(x_j + y_j))`, square.
    TanhSum { base: T, scale: T },
    Custom { f: PairFn<T>, rows: usize, cols: usize },
}

/// Segment interaction drift `B̃(ξ, η)`.
#[derive(Clone)]
pub enum SegmentDrift<T> {
    Zero,
    /// `P ξ(0) + Q ξ(−r0) + R η(0) + S η(−r0) + c`.
    Affine {
        self_now: Matrix<T>,
        self_lag: Matrix<T>,
        other_now: Matrix<T>,
        other_lag: Matrix<T>,
        c: Vec<T>,
    },
    Custom { f: SegmentPairFn<T>, out_dim: usize },
}

/// Segment diffusion kernel `σ̃(ξ, η)`.
#[derive(Clone)]
pub enum SegmentDiffusion<T> {
    Constant(Matrix<T>),
    /// `diag(base + scale · tanh(ξ(0)_j))`; depends on the own path only.
    HeadTanh { base: T, scale: T },
    Custom { f: SegmentPairFn<T>, rows: usize, cols: usize },
}

macro_rules! opaque_debug {
    ($ty:ident, $($variant:ident),*) => {
        impl<T: fmt::Debug> fmt::Debug for $ty<T> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match self {
                    $(Self::$variant { .. } => f.write_str(concat!(stringify!($ty), "::", stringify!($variant))),)*
                }
            }
        }
    };
}

opaque_debug!(SelfDrift, Affine, Custom);
opaque_debug!(PairDrift, Zero, Affine, TanhDifference, Custom);
opaque_debug!(PairDiffusion, Constant, TanhSum, Custom);
opaque_debug!(SegmentDrift, Zero, Affine, Custom);
opaque_debug!(SegmentDiffusion, Constant, HeadTanh, Custom);

impl<T: Scalar> SelfDrift<T> {
    pub fn linear(a: Matrix<T>) -> Self {
        let c = vec![T::zero(); a.rows()];
        Self::Affine { a, c }
    }

    #[inline]
    pub fn eval(&self, t: T, x: &[T], out: &mut [T]) {
        match self {
            Self::Affine { a, c } => {
                a.mul_vec_into(x, out);
                for (o, ci) in out.iter_mut().zip(c) {
                    *o += *ci;
                }
            }
            Self::Custom(f) => f(t, x, out),
        }
    }
}

/// `Σ_m 1 / (e_m + shift)` over the `j`-th coordinate of a `count × stride` table.
///
/// Four independent accumulators in a fixed order keep the result
/// deterministic while letting the loop vectorize.
#[inline]
fn sum_recip_shifted<T: Scalar>(table: &[T], stride: usize, j: usize, shift: T) -> T {
    if stride == 1 {
        let mut acc = [T::zero(); 4];
        let chunks = table.chunks_exact(4);
        let rest = chunks.remainder();
        for c in chunks {
            acc[0] += T::one() / (c[0] + shift);
            acc[1] += T::one() / (c[1] + shift);
            acc[2] += T::one() / (c[2] + shift);
            acc[3] += T::one() / (c[3] + shift);
        }
        let mut tail = T::zero();
        for &e in rest {
            tail += T::one() / (e + shift);
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    } else {
        table
            .iter()
            .skip(j)
            .step_by(stride)
            .fold(T::zero(), |acc, &e| acc + T::one() / (e + shift))
    }
}

/// Mean of `tanh(y_j − x_j)` over the measure.
fn mean_tanh_difference<T: Scalar>(x: T, j: usize, mu: &MeasureSummary<'_, T>) -> T {
    let n = T::from_usize_lossy(mu.count());
    let dim = mu.mean_now().len();
    if let Some(table) = mu.exp2() {
        if x.abs() <= T::exp_pair_bound() {
            // tanh(y − x) = 1 − 2 e^{2x} / (e^{2y} + e^{2x})
            let ex = (T::lit(2.0) * x).exp();
            let s = sum_recip_shifted(table, dim, j, ex);
            return T::one() - T::lit(2.0) * ex * s / n;
        }
    }
    let cloud = mu.cloud().expect("tanh kernel average needs the particle cloud");
    cloud
        .segments()
        .fold(T::zero(), |acc, seg| acc + (seg.head()[j] - x).tanh())
        / n
}

/// Mean of `tanh(x_j + y_j)` over the measure.
fn mean_tanh_sum<T: Scalar>(x: T, j: usize, mu: &MeasureSummary<'_, T>) -> T {
    let n = T::from_usize_lossy(mu.count());
    let dim = mu.mean_now().len();
    if let Some(table) = mu.exp2() {
        if x.abs() <= T::exp_pair_bound() {
            // tanh(x + y) = 1 − 2 e^{-2x} / (e^{2y} + e^{-2x})
            let inv = (-T::lit(2.0) * x).exp();
            let s = sum_recip_shifted(table, dim, j, inv);
            return T::one() - T::lit(2.0) * inv * s / n;
        }
    }
    let cloud = mu.cloud().expect("tanh kernel average needs the particle cloud");
    cloud
        .segments()
        .fold(T::zero(), |acc, seg| acc + (seg.head()[j] + x).tanh())
        / n
}

impl<T: Scalar> PairDrift<T> {
    pub fn needs(&self) -> SummaryNeeds {
        match self {
            Self::Zero => SummaryNeeds::default(),
            Self::Affine { .. } => SummaryNeeds {
                means: true,
                ..Default::default()
            },
            Self::TanhDifference { .. } => SummaryNeeds {
                means: true,
                cloud: true,
                exp2: true,
            },
            Self::Custom(_) => SummaryNeeds {
                cloud: true,
                ..Default::default()
            },
        }
    }

    /// `∫ b(x, y) μ(dy)` is available from the mean alone.
    pub fn is_affine_in_measure(&self) -> bool {
        matches!(self, Self::Zero | Self::Affine { .. })
    }

    #[inline]
    pub fn eval(&self, t: T, x: &[T], y: &[T], out: &mut [T]) {
        match self {
            Self::Zero => out.iter_mut().for_each(|o| *o = T::zero()),
            Self::Affine { on_x, on_y, c } => {
                on_x.mul_vec_into(x, out);
                on_y.mul_vec_acc(y, out);
                for (o, ci) in out.iter_mut().zip(c) {
                    *o += *ci;
                }
            }
            Self::TanhDifference { scale } => {
                for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
                    *o = *scale * (*yi - *xi).tanh();
                }
            }
            Self::Custom(f) => f(t, x, y, out),
        }
    }

    /// `out ← ∫ b(t, x, y) μ(dy)`.
    pub fn average(&self, t: T, x: &[T], mu: &MeasureSummary<'_, T>, out: &mut [T]) {
        match self {
            Self::Zero => out.iter_mut().for_each(|o| *o = T::zero()),
            Self::Affine { on_x, on_y, c } => {
                on_x.mul_vec_into(x, out);
                on_y.mul_vec_acc(mu.mean_now(), out);
                for (o, ci) in out.iter_mut().zip(c) {
                    *o += *ci;
                }
            }
            Self::TanhDifference { scale } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = *scale * mean_tanh_difference(x[j], j, mu);
                }
            }
            Self::Custom(f) => {
                let cloud = mu.cloud().expect("custom kernel average needs the particle cloud");
                let mut tmp = vec![T::zero(); out.len()];
                out.iter_mut().for_each(|o| *o = T::zero());
                for seg in cloud.segments() {
                    f(t, x, seg.head(), &mut tmp);
                    for (o, v) in out.iter_mut().zip(&tmp) {
                        *o += *v;
                    }
                }
                let n = T::from_usize_lossy(cloud.len());
                out.iter_mut().for_each(|o| *o /= n);
            }
        }
    }
}

impl<T: Scalar> PairDiffusion<T> {
    pub fn needs(&self) -> SummaryNeeds {
        match self {
            Self::Constant(_) => SummaryNeeds::default(),
            Self::TanhSum { .. } => SummaryNeeds {
                means: true,
                cloud: true,
                exp2: true,
            },
            Self::Custom { .. } => SummaryNeeds {
                cloud: true,
                ..Default::default()
            },
        }
    }

    pub fn shape(&self, d: usize) -> (usize, usize) {
        match self {
            Self::Constant(m) => (m.rows(), m.cols()),
            Self::TanhSum { .. } => (d, d),
            Self::Custom { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn is_affine_in_measure(&self) -> bool {
        matches!(self, Self::Constant(_))
    }

    #[inline]
    pub fn eval(&self, t: T, x: &[T], y: &[T], out: &mut [T]) {
        match self {
            Self::Constant(m) => out.copy_from_slice(m.as_slice()),
            Self::TanhSum { base, scale } => {
                let d = x.len();
                out.iter_mut().for_each(|o| *o = T::zero());
                for j in 0..d {
                    out[j * d + j] = *base + *scale * (x[j] + y[j]).tanh();
                }
            }
            Self::Custom { f, .. } => f(t, x, y, out),
        }
    }

    /// `out ← ∫ σ̃(t, x, y) μ(dy)`, row-major `d × n`.
    pub fn average(&self, t: T, x: &[T], mu: &MeasureSummary<'_, T>, out: &mut [T]) {
        match self {
            Self::Constant(m) => out.copy_from_slice(m.as_slice()),
            Self::TanhSum { base, scale } => {
                let d = x.len();
                out.iter_mut().for_each(|o| *o = T::zero());
                for j in 0..d {
                    out[j * d + j] = *base + *scale * mean_tanh_sum(x[j], j, mu);
                }
            }
            Self::Custom { f, .. } => {
                let cloud = mu.cloud().expect("custom kernel average needs the particle cloud");
                let mut tmp = vec![T::zero(); out.len()];
                out.iter_mut().for_each(|o| *o = T::zero());
                for seg in cloud.segments() {
                    f(t, x, seg.head(), &mut tmp);
                    for (o, v) in out.iter_mut().zip(&tmp) {
                        *o += *v;
                    }
                }
                let n = T::from_usize_lossy(cloud.len());
                out.iter_mut().for_each(|o| *o /= n);
            }
        }
    }
}

impl<T: Scalar> SegmentDrift<T> {
    pub fn needs(&self) -> SummaryNeeds {
        match self {
            Self::Zero => SummaryNeeds::default(),
            Self::Affine { .. } => SummaryNeeds {
                means: true,
                ..Default::default()
            },
            Self::Custom { .. } => SummaryNeeds {
                cloud: true,
                ..Default::default()
            },
        }
    }

    pub fn is_affine_in_measure(&self) -> bool {
        matches!(self, Self::Zero | Self::Affine { .. })
    }

    pub fn eval(&self, t: T, xi: &SegmentView<'_, T>, eta: &SegmentView<'_, T>, out: &mut [T]) {
        match self {
            Self::Zero => out.iter_mut().for_each(|o| *o = T::zero()),
            Self::Affine {
                self_now,
                self_lag,
                other_now,
                other_lag,
                c,
            } => affine_segment(self_now, self_lag, other_now, other_lag, c, xi, eta.head(), eta.tail(), out),
            Self::Custom { f, .. } => f(t, xi, eta, out),
        }
    }

    /// `out ← ∫ B̃(t, ξ, η) μ(dη)`.
    pub fn average(&self, t: T, xi: &SegmentView<'_, T>, mu: &MeasureSummary<'_, T>, out: &mut [T]) {
        match self {
            Self::Zero => out.iter_mut().for_each(|o| *o = T::zero()),
            Self::Affine {
                self_now,
                self_lag,
                other_now,
                other_lag,
                c,
            } => affine_segment(
                self_now,
                self_lag,
                other_now,
                other_lag,
                c,
                xi,
                mu.mean_now(),
                mu.mean_lag(),
                out,
            ),
            Self::Custom { f, .. } => {
                let cloud = mu.cloud().expect("custom kernel average needs the particle cloud");
                let mut tmp = vec![T::zero(); out.len()];
                out.iter_mut().for_each(|o| *o = T::zero());
                for eta in cloud.segments() {
                    f(t, xi, &eta, &mut tmp);
                    for (o, v) in out.iter_mut().zip(&tmp) {
                        *o += *v;
                    }
                }
                let n = T::from_usize_lossy(cloud.len());
                out.iter_mut().for_each(|o| *o /= n);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn affine_segment<T: Scalar>(
    self_now: &Matrix<T>,
    self_lag: &Matrix<T>,
    other_now: &Matrix<T>,
    other_lag: &Matrix<T>,
    c: &[T],
    xi: &SegmentView<'_, T>,
    eta_now: &[T],
    eta_lag: &[T],
    out: &mut [T],
) {
    self_now.mul_vec_into(xi.head(), out);
    self_lag.mul_vec_acc(xi.tail(), out);
    other_now.mul_vec_acc(eta_now, out);
    other_lag.mul_vec_acc(eta_lag, out);
    for (o, ci) in out.iter_mut().zip(c) {
        *o += *ci;
    }
}

impl<T: Scalar> SegmentDiffusion<T> {
    pub fn needs(&self) -> SummaryNeeds {
        match self {
            Self::Constant(_) | Self::HeadTanh { .. } => SummaryNeeds::default(),
            Self::Custom { .. } => SummaryNeeds {
                cloud: true,
                ..Default::default()
            },
        }
    }

    pub fn shape(&self, d: usize) -> (usize, usize) {
        match self {
            Self::Constant(m) => (m.rows(), m.cols()),
            Self::HeadTanh { .. } => (d, d),
            Self::Custom { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn is_affine_in_measure(&self) -> bool {
        matches!(self, Self::Constant(_) | Self::HeadTanh { .. })
    }

    pub fn eval(&self, t: T, xi: &SegmentView<'_, T>, eta: &SegmentView<'_, T>, out: &mut [T]) {
        match self {
            Self::Constant(m) => out.copy_from_slice(m.as_slice()),
            Self::HeadTanh { base, scale } => head_tanh(*base, *scale, xi.head(), out),
            Self::Custom { f, .. } => f(t, xi, eta, out),
        }
    }

    pub fn average(&self, t: T, xi: &SegmentView<'_, T>, mu: &MeasureSummary<'_, T>, out: &mut [T]) {
        match self {
            Self::Constant(m) => out.copy_from_slice(m.as_slice()),
            Self::HeadTanh { base, scale } => head_tanh(*base, *scale, xi.head(), out),
            Self::Custom { f, .. } => {
                let cloud = mu.cloud().expect("custom kernel average needs the particle cloud");
                let mut tmp = vec![T::zero(); out.len()];
                out.iter_mut().for_each(|o| *o = T::zero());
                for eta in cloud.segments() {
                    f(t, xi, &eta, &mut tmp);
                    for (o, v) in out.iter_mut().zip(&tmp) {
                        *o += *v;
                    }
                }
                let n = T::from_usize_lossy(cloud.len());
                out.iter_mut().for_each(|o| *o /= n);
            }
        }
    }
}

fn head_tanh<T: Scalar>(base: T, scale: T, head: &[T], out: &mut [T]) {
    let d = head.len();
    out.iter_mut().for_each(|o| *o = T::zero());
    for j in 0..d {
        out[j * d + j] = base + scale * head[j].tanh();
    }
}
