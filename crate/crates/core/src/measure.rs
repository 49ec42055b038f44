//! What a kernel average `∫ k(x, y) μ(dy)` needs to know about `μ`.
//!
//! For an empirical measure the summary borrows the particle cloud; for a
//! Gaussian law it carries only moments. Affine kernels read the means,
//! tanh kernels read cached `exp(2y)` values, custom kernels loop over the cloud.

use std::borrow::Cow;

use crate::scalar::Scalar;
use crate::segment::SegmentCloud;

/// Which parts of a measure summary a model's kernels read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SummaryNeeds {
    pub means: bool,
    pub cloud: bool,
    pub exp2: bool,
}

impl SummaryNeeds {
    pub fn union(self, other: Self) -> Self {
        Self {
            means: self.means || other.means,
            cloud: self.cloud || other.cloud,
            exp2: self.exp2 || other.exp2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeasureSummary<'a, T: Clone> {
    count: usize,
    mean_now: Vec<T>,
    mean_lag: Vec<T>,
    cloud: Option<SegmentCloud<'a, T>>,
    exp2: Option<Cow<'a, [T]>>,
}

impl<'a, T: Scalar> MeasureSummary<'a, T> {
    /// Summary of the empirical measure of `cloud`.
    pub fn empirical(cloud: SegmentCloud<'a, T>, needs: SummaryNeeds) -> Self {
        let dim = cloud.dim();
        let count = cloud.len();
        let mut mean_now = vec![T::zero(); dim];
        let mut mean_lag = vec![T::zero(); dim];
        if needs.means && count > 0 {
            for seg in cloud.segments() {
                for (acc, v) in mean_now.iter_mut().zip(seg.head()) {
                    *acc += *v;
                }
                for (acc, v) in mean_lag.iter_mut().zip(seg.tail()) {
                    *acc += *v;
                }
            }
            let n = T::from_usize_lossy(count);
            mean_now.iter_mut().for_each(|v| *v /= n);
            mean_lag.iter_mut().for_each(|v| *v /= n);
        }
        let exp2 = if needs.exp2 {
            exp2_of_heads(&cloud).map(Cow::Owned)
        } else {
            None
        };
        Self {
            count,
            mean_now,
            mean_lag,
            cloud: Some(cloud),
            exp2,
        }
    }

    /// Summary of an empirical measure with a precomputed `exp(2·head)` table.
    pub(crate) fn empirical_with_exp2(
        cloud: SegmentCloud<'a, T>,
        mean_now: Vec<T>,
        mean_lag: Vec<T>,
        exp2: Option<&'a [T]>,
        keep_cloud: bool,
    ) -> Self {
        Self {
            count: cloud.len(),
            mean_now,
            mean_lag,
            cloud: keep_cloud.then_some(cloud),
            exp2: exp2.map(Cow::Borrowed),
        }
    }

    /// Summary carrying moments only (a Gaussian law or a stored mean path).
    pub fn moments_only(mean_now: Vec<T>, mean_lag: Vec<T>) -> Self {
        Self {
            count: 0,
            mean_now,
            mean_lag,
            cloud: None,
            exp2: None,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean_now(&self) -> &[T] {
        &self.mean_now
    }

    pub fn mean_lag(&self) -> &[T] {
        &self.mean_lag
    }

    pub fn cloud(&self) -> Option<&SegmentCloud<'a, T>> {
        self.cloud.as_ref()
    }

    /// `exp(2 y_{m,j})` for every cloud head, `count × dim`, if cached.
    pub fn exp2(&self) -> Option<&[T]> {
        self.exp2.as_deref()
    }
}

/// `exp(2·head)` table, or `None` when some coordinate leaves the range where
/// the rational tanh identities are safe.
pub(crate) fn exp2_of_heads<T: Scalar>(cloud: &SegmentCloud<'_, T>) -> Option<Vec<T>> {
    let bound = T::exp_pair_bound();
    let two = T::lit(2.0);
    let mut out = Vec::with_capacity(cloud.len() * cloud.dim());
    let mut push = |v: T| {
        if v.abs() > bound {
            return false;
        }
        out.push((two * v).exp());
        true
    };
    match cloud.contiguous_heads() {
        Some(heads) => {
            for &v in heads {
                if !push(v) {
                    return None;
                }
            }
        }
        None => {
            for seg in cloud.segments() {
                for &v in seg.head() {
                    if !push(v) {
                        return None;
                    }
                }
            }
        }
    }
    Some(out)
}
