//! Views of discretized path segments `{x(t+s) : s ∈ [−r0, 0]}`.
//!
//! A segment of `L + 1` grid points in `R^D` can live in a ring buffer
//! (particle histories) or in a time-major history table (stored reference
//! runs). Both are addressed the same way: the point at lag `j` steps sits
//! at `origin + slot(j) * stride`.

use crate::linalg::norm_sq;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a, T> {
    data: &'a [T],
    dim: usize,
    lag: usize,
    origin: usize,
    slot: usize,
    wrap: usize,
    stride: usize,
}

impl<'a, T: Scalar> SegmentView<'a, T> {
    /// Segment stored contiguously, oldest point first, newest (the head) last.
    pub fn from_oldest_first(data: &'a [T], dim: usize) -> Self {
        assert!(dim > 0 && !data.is_empty() && data.len() % dim == 0);
        let len = data.len() / dim;
        Self {
            data,
            dim,
            lag: len - 1,
            origin: 0,
            slot: len - 1,
            wrap: 0,
            stride: dim,
        }
    }

    pub(crate) fn ring(data: &'a [T], dim: usize, lag: usize, particle: usize, head_slot: usize) -> Self {
        Self {
            data,
            dim,
            lag,
            origin: particle * (lag + 1) * dim,
            slot: head_slot,
            wrap: lag + 1,
            stride: dim,
        }
    }

    pub(crate) fn history(data: &'a [T], dim: usize, lag: usize, particle: usize, count: usize, row: usize) -> Self {
        Self {
            data,
            dim,
            lag,
            origin: particle * dim,
            slot: row,
            wrap: 0,
            stride: count * dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of delay steps `L`; the segment holds `L + 1` points.
    pub fn lag_steps(&self) -> usize {
        self.lag
    }

    pub fn len(&self) -> usize {
        self.lag + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Point at `j` steps in the past (`j = 0` is the current state).
    #[inline]
    pub fn at_lag(&self, j: usize) -> &'a [T] {
        debug_assert!(j <= self.lag);
        let s = if self.wrap > 0 {
            (self.slot + self.wrap - j) % self.wrap
        } else {
            self.slot - j
        };
        let start = self.origin + s * self.stride;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn head(&self) -> &'a [T] {
        self.at_lag(0)
    }

    /// Oldest point, `x(t − r0)`.
    #[inline]
    pub fn tail(&self) -> &'a [T] {
        self.at_lag(self.lag)
    }

    /// Points from the current state backwards in time.
    pub fn points(&self) -> impl Iterator<Item = &'a [T]> + '_ {
        (0..=self.lag).map(move |j| self.at_lag(j))
    }

    /// Grid sup-norm `max_j |x(t − j dt)|`.
    pub fn sup_norm(&self) -> T {
        self.points()
            .map(|p| norm_sq(p))
            .fold(T::zero(), T::max)
            .sqrt()
    }

    /// Squared grid sup-norm of the pointwise difference of two segments.
    pub fn sup_dist_sq(&self, other: &SegmentView<'_, T>) -> T {
        debug_assert_eq!(self.lag, other.lag);
        (0..=self.lag)
            .map(|j| crate::linalg::dist_sq(self.at_lag(j), other.at_lag(j)))
            .fold(T::zero(), T::max)
    }
}

#[derive(Debug, Clone, Copy)]
enum CloudLayout {
    Ring { head_slot: usize },
    History { row: usize },
}

/// A collection of `count` segments sharing one layout.
#[derive(Debug, Clone, Copy)]
pub struct SegmentCloud<'a, T> {
    data: &'a [T],
    dim: usize,
    lag: usize,
    count: usize,
    layout: CloudLayout,
}

impl<'a, T: Scalar> SegmentCloud<'a, T> {
    pub(crate) fn ring(data: &'a [T], dim: usize, lag: usize, count: usize, head_slot: usize) -> Self {
        Self {
            data,
            dim,
            lag,
            count,
            layout: CloudLayout::Ring { head_slot },
        }
    }

    pub(crate) fn history(data: &'a [T], dim: usize, lag: usize, count: usize, row: usize) -> Self {
        Self {
            data,
            dim,
            lag,
            count,
            layout: CloudLayout::History { row },
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn segment(&self, m: usize) -> SegmentView<'a, T> {
        match self.layout {
            CloudLayout::Ring { head_slot } => {
                SegmentView::ring(self.data, self.dim, self.lag, m, head_slot)
            }
            CloudLayout::History { row } => {
                SegmentView::history(self.data, self.dim, self.lag, m, self.count, row)
            }
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = SegmentView<'a, T>> + '_ {
        (0..self.count).map(move |m| self.segment(m))
    }

    /// Current states as a contiguous `count × dim` array when the layout allows it.
    pub fn contiguous_heads(&self) -> Option<&'a [T]> {
        match self.layout {
            CloudLayout::Ring { .. } if self.lag == 0 => Some(&self.data[..self.count * self.dim]),
            CloudLayout::History { row } => {
                let start = row * self.count * self.dim;
                Some(&self.data[start..start + self.count * self.dim])
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sup_norm_examples() {
        let c = [3.0, 4.0, 3.0, 4.0];
        assert_eq!(SegmentView::from_oldest_first(&c, 2).sup_norm(), 5.0);
        let v = [-3.0, 1.0, 2.0];
        assert_eq!(SegmentView::from_oldest_first(&v, 1).sup_norm(), 3.0);
        let z = [0.0f32; 6];
        assert_eq!(SegmentView::from_oldest_first(&z, 2).sup_norm(), 0.0);
    }

    #[test]
    fn ring_addressing_wraps() {
        // one particle, dim 1, L = 2, ring slots hold [t-1, t, t-2] with head in slot 1
        let data = [10.0, 20.0, 0.0];
        let seg = SegmentView::ring(&data, 1, 2, 0, 1);
        assert_eq!(seg.head(), &[20.0]);
        assert_eq!(seg.at_lag(1), &[10.0]);
        assert_eq!(seg.tail(), &[0.0]);
    }

    #[test]
    fn history_addressing() {
        // rows = time, 2 particles of dim 1: row r holds [p0, p1]
        let data = [0.0, 100.0, 1.0, 101.0, 2.0, 102.0];
        let cloud = SegmentCloud::history(&data, 1, 1, 2, 2);
        let s1 = cloud.segment(1);
        assert_eq!(s1.head(), &[102.0]);
        assert_eq!(s1.tail(), &[101.0]);
        assert_eq!(cloud.contiguous_heads().unwrap(), &[2.0, 102.0]);
    }
}
