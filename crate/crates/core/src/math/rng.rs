//! Seeded random stream.
//!
//! The generator is ChaCha8 keyed by `seed` and positioned on stream
//! `stream`. ChaCha is counter based, so distinct stream ids give
//! non-overlapping sequences and the output is identical on every platform.
//!
//! Derived draws:
//! - uniform `[0, 1)`: top 53 bits of one `u64`, times `2^-53`;
//! - standard normal: Box–Muller on two uniforms, the second value cached;
//! - bounded integers: Lemire's multiply-and-reject.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
    cached_normal: Option<f64>,
}

/// Everything needed to resume a stream bit-identically.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
    pub cached_normal: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// Independent stream `stream` of generator `seed`.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            inner,
            cached_normal: None,
        }
    }

    /// A fresh stream of the same seed; does not advance `self`.
    pub fn derive(&self, stream: u64) -> Self {
        Self::substream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.inner.get_stream()
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
            cached_normal: self.cached_normal,
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Self {
        let mut rng = Self::substream(snap.seed, snap.stream);
        rng.inner.set_word_pos(snap.word_pos);
        rng.cached_normal = snap.cached_normal;
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when `lo == hi`.
    pub fn sample_uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        ensure!(
            lo.is_finite() && hi.is_finite() && lo <= hi,
            "sample_uniform: need finite lo <= hi, got [{lo}, {hi})"
        );
        let u = self.uniform();
        if lo == hi {
            return Ok(lo);
        }
        let v = lo + (hi - lo) * u;
        // rounding can land exactly on hi
        Ok(if v >= hi { prev_float(hi).max(lo) } else { v })
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `len` independent draws with `P(true) = rho`.
    pub fn bernoulli_mask(&mut self, len: usize, rho: f64) -> Result<Vec<bool>> {
        ensure!(
            (0.0..=1.0).contains(&rho),
            "bernoulli_mask: rho must lie in [0, 1], got {rho}"
        );
        Ok((0..len).map(|_| self.uniform() < rho).collect())
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

fn prev_float(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else if x < 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        -f64::from_bits(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_interval() {
        let mut rng = RngState::new(1);
        assert_eq!(rng.sample_uniform(0.9, 0.9).unwrap(), 0.9);
        assert!(rng.sample_uniform(1.0, 0.0).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        for _ in 0..100 {
            assert_eq!(a.sample_uniform(0.0, 1.0).unwrap(), b.sample_uniform(0.0, 1.0).unwrap());
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    #[test]
    fn substreams_differ() {
        let mut a = RngState::substream(7, 0);
        let mut b = RngState::substream(7, 1);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn uniform_mean() {
        let mut rng = RngState::new(11);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let v = rng.sample_uniform(0.0, 1.0).unwrap();
            assert!((0.0..1.0).contains(&v));
            sum += v;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.002);
    }

    #[test]
    fn normal_moments() {
        let mut rng = RngState::new(12);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.standard_normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn antithetic_pairs_cancel() {
        let mut rng = RngState::new(13);
        let mut sum = 0.0;
        for _ in 0..1000 {
            let z = rng.standard_normal();
            sum += z + (-z);
        }
        assert_eq!(sum, 0.0);
    }

    #[test]
    fn bernoulli_extremes_and_rate() {
        let mut rng = RngState::new(14);
        assert!(rng.bernoulli_mask(50, 1.0).unwrap().iter().all(|&b| b));
        assert!(rng.bernoulli_mask(50, 0.0).unwrap().iter().all(|&b| !b));
        assert!(rng.bernoulli_mask(5, 1.5).is_err());
        assert!(rng.bernoulli_mask(5, -0.1).is_err());
        let mask = rng.bernoulli_mask(100_000, 0.3).unwrap();
        let frac = mask.iter().filter(|&&b| b).count() as f64 / 1e5;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
    }

    #[test]
    fn snapshot_replays_stream() {
        let mut rng = RngState::substream(99, 3);
        for _ in 0..17 {
            rng.standard_normal();
        }
        let snap = rng.snapshot();
        let expect: Vec<u64> = (0..5).map(|_| rng.standard_normal().to_bits()).collect();
        let mut again = RngState::restore(&snap);
        let got: Vec<u64> = (0..5).map(|_| again.standard_normal().to_bits()).collect();
        assert_eq!(expect, got);
    }

    #[test]
    fn below_covers_range() {
        let mut rng = RngState::new(5);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[rng.below(7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }
}
