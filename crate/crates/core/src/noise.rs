//! Counter-based Brownian increments.
//!
//! The increment of particle `i` at step `s` is read from the ChaCha8
//! keystream with stream id `i`, starting at a word offset proportional to
//! `s`. It depends on `(seed, i, s)` only, so evaluation order and thread
//! count cannot change it.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Tweak applied to the key when deriving child keys, so derivation never
/// reads the same keystream as noise generation.
const DERIVE_TWEAK: [u8; 32] = *b"mfchaos/noise-plan/derive-key/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoisePlan {
    master_seed: u64,
    key: [u8; 32],
}

impl NoisePlan {
    pub fn new(master_seed: u64) -> Self {
        let mut key = [0u8; 32];
        ChaCha8Rng::seed_from_u64(master_seed).fill_bytes(&mut key);
        Self { master_seed, key }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Independent plan for a labelled sub-domain (replica, initial draws, reference run).
    pub fn derive(&self, domain: u64) -> Self {
        let mut k = self.key;
        for (b, t) in k.iter_mut().zip(DERIVE_TWEAK) {
            *b ^= t;
        }
        let mut rng = ChaCha8Rng::from_seed(k);
        rng.set_stream(domain);
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Self {
            master_seed: self.master_seed,
            key,
        }
    }

    fn stream(&self, index: usize, step: u64, count: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index as u64);
        // one Box–Muller pair consumes two u64 draws = four 32-bit words
        let words = 4 * count.div_ceil(2) as u128;
        rng.set_word_pos(step as u128 * words);
        rng
    }

    /// `out.len()` i.i.d. standard normals for `(index, step)`.
    pub fn standard_normals<T: Scalar>(&self, index: usize, step: u64, out: &mut [T]) {
        self.cursor(index, step, out.len()).next_normals(out);
    }

    /// Sequential reader of the draws for particle `index`, positioned at
    /// `step`. Successive calls yield steps `step, step + 1, …` and agree
    /// exactly with [`NoisePlan::standard_normals`].
    pub fn cursor(&self, index: usize, step: u64, count: usize) -> NoiseCursor {
        NoiseCursor {
            rng: self.stream(index, step, count),
            count,
        }
    }

    /// Brownian increments `ΔW ~ N(0, dt I)` for particle `index` at `step`.
    pub fn increments<T: Scalar>(&self, index: usize, step: u64, dt: T, out: &mut [T]) {
        self.standard_normals(index, step, out);
        let s = dt.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }

    /// Sequential generator for bulk sampling on stream `index`.
    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct NoiseCursor {
    rng: ChaCha8Rng,
    count: usize,
}

impl NoiseCursor {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn next_normals<T: Scalar>(&mut self, out: &mut [T]) {
        debug_assert_eq!(out.len(), self.count);
        for pair in out.chunks_mut(2) {
            let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            pair[0] = T::lit(z0);
            if pair.len() > 1 {
                pair[1] = T::lit(z1);
            }
        }
    }

    pub fn next_increments<T: Scalar>(&mut self, dt: T, out: &mut [T]) {
        self.next_normals(out);
        let s = dt.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }
}

/// Uniform in `[0, 1)` with 53 random bits.
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    // u1 in (0, 1] keeps the logarithm finite
    let u1 = 1.0 - unit_f64(a);
    let u2 = unit_f64(b);
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// A standard normal drawn from a sequential generator.
pub fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    box_muller(rng.next_u64(), rng.next_u64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increments_depend_only_on_index_and_step() {
        let plan = NoisePlan::new(7);
        let mut a = [0.0f64; 3];
        let mut b = [0.0f64; 3];
        plan.increments(5, 1000, 1e-3, &mut a);
        // other calls in between must not matter
        let mut junk = [0.0f64; 3];
        plan.increments(4, 999, 1e-3, &mut junk);
        plan.increments(5, 1000, 1e-3, &mut b);
        assert_eq!(a, b);
        plan.increments(5, 1001, 1e-3, &mut b);
        assert_ne!(a, b);
        plan.increments(6, 1000, 1e-3, &mut b);
        assert_ne!(a, b);
    }

    #[test]
    fn consecutive_steps_tile_the_stream() {
        // step s of a 2-dimensional draw is the s-th Box–Muller pair of the sequential stream
        let plan = NoisePlan::new(11);
        let mut seq = plan.rng(3);
        for s in 0..10u64 {
            let (z0, z1) = normal_pair(&mut seq);
            let mut out = [0.0f64; 2];
            plan.standard_normals(3, s, &mut out);
            assert_eq!(out, [z0, z1]);
        }
    }

    #[test]
    fn cursor_agrees_with_counter_formula() {
        let plan = NoisePlan::new(21);
        for count in [1usize, 2, 3, 5] {
            let mut cur = plan.cursor(7, 40, count);
            for s in 40..60u64 {
                let mut a = vec![0.0f64; count];
                let mut b = vec![0.0f64; count];
                cur.next_increments(0.01, &mut a);
                plan.increments(7, s, 0.01, &mut b);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn derived_plans_differ() {
        let plan = NoisePlan::new(1);
        assert_ne!(plan.derive(0), plan.derive(1));
        assert_ne!(plan.derive(0), plan);
        assert_eq!(plan.derive(9), NoisePlan::new(1).derive(9));
        assert_eq!(plan.derive(9).master_seed(), 1);
    }

    #[test]
    fn normals_have_unit_moments() {
        let plan = NoisePlan::new(3);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut out = [0.0f64; 1];
        for s in 0..n {
            plan.standard_normals(0, s as u64, &mut out);
            sum += out[0];
            sum_sq += out[0] * out[0];
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn f32_draws_match_f64() {
        let plan = NoisePlan::new(2);
        let mut a = [0.0f32; 3];
        let mut b = [0.0f64; 3];
        plan.standard_normals(1, 4, &mut a);
        plan.standard_normals(1, 4, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, *y as f32);
        }
    }
}
