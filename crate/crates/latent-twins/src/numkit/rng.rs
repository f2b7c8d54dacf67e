//! Seeded random streams with a platform-independent sequence.
//!
//! The generator is ChaCha8 keyed by a 64-bit seed; uniforms take the top
//! 53 bits of each output word, and gaussians come from the Box-Muller
//! transform (not ziggurat), so the exact sequence is pinned by this file
//! plus the ChaCha specification.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub const RNG_ALGORITHM_ID: &str = "chacha8/boxmuller";

/// Single-owner random stream. Fork child streams with [`RngStream::fork`]
/// instead of sharing one stream across tasks.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
    cached_gaussian: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, rng: ChaCha8Rng::seed_from_u64(seed), cached_gaussian: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm_id(&self) -> &'static str {
        RNG_ALGORITHM_ID
    }

    /// Derive an independent child stream. The child seed mixes the parent
    /// seed and the index through SplitMix64, so distinct indices give
    /// unrelated streams.
    pub fn fork(&self, index: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo < hi, "uniform: invalid range [{lo}, {hi})");
        lo + (hi - lo) * self.unit()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        assert!(std >= 0.0, "gaussian: negative std {std}");
        if std == 0.0 {
            // Still consume state so σ=0 does not shift the sequence shape.
            return mean;
        }
        mean + std * self.standard_gaussian()
    }

    fn standard_gaussian(&mut self) -> f64 {
        if let Some(z) = self.cached_gaussian.take() {
            return z;
        }
        // Box-Muller on (0,1] x [0,1).
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below: empty range");
        // Multiply-shift bounds the value to [0, n) without rejection bias
        // beyond 2^-64, which is irrelevant at our sample counts.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(123);
        let mut b = RngStream::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = RngStream::new(123);
        let mut b = RngStream::new(123);
        for _ in 0..100 {
            assert_eq!(a.gaussian(0.0, 1.0).to_bits(), b.gaussian(0.0, 1.0).to_bits());
        }
    }

    #[test]
    fn zero_std_returns_mean_exactly() {
        let mut s = RngStream::new(1);
        assert_eq!(s.gaussian(2.5, 0.0), 2.5);
    }

    #[test]
    fn uniform_mean_within_clt_bound() {
        let mut s = RngStream::new(77);
        let n = 1_000_000;
        let mean = (0..n).map(|_| s.unit()).sum::<f64>() / n as f64;
        // std of the mean is 1/sqrt(12n) ≈ 2.9e-4; 0.002 is ~7 sigma.
        assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn gaussian_moments() {
        let mut s = RngStream::new(99);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| s.gaussian(1.0, 2.0)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 4.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn forked_streams_differ_from_parent_and_each_other() {
        let parent = RngStream::new(5);
        let mut c0 = parent.fork(0);
        let mut c1 = parent.fork(1);
        let mut p = parent.clone();
        let (a, b, c) = (p.next_u64(), c0.next_u64(), c1.next_u64());
        assert_ne!(a, b);
        assert_ne!(b, c);
        // Forking is a pure function of (seed, index).
        assert_eq!(RngStream::new(5).fork(1).next_u64(), c);
    }

    #[test]
    fn below_is_in_range_and_covers_values() {
        let mut s = RngStream::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[s.below(7)] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    #[should_panic]
    fn uniform_rejects_bad_range() {
        RngStream::new(0).uniform(1.0, 1.0);
    }
}
