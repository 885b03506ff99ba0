//! Seeded pseudo-random streams.
//!
//! The generator is xoshiro256** seeded through SplitMix64 (the expansion
//! used by `rand_xoshiro`'s `seed_from_u64`). Derived draws are defined here
//! explicitly so other implementations can reproduce them:
//!
//! * `uniform()` = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`;
//! * `below(n)` = rejection sampling of `next_u64() % n` outside the biased
//!   tail `[u64::MAX - u64::MAX % n, u64::MAX]`;
//! * `normal()` = Box-Muller on `u1 = 1 - uniform()`, `u2 = uniform()`,
//!   returning the cosine branch first and caching the sine branch.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as u64) as i64
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle driven by [`Rng::below`].
    pub fn shuffle<E>(&mut self, items: &mut [E]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Tensor of independent `N(mean, std^2)` draws.
pub fn gaussian_fill<T: Scalar>(shape: &[usize], seed: u64, mean: f64, std: f64) -> Result<Tensor<T>> {
    assert!(std >= 0.0, "negative standard deviation");
    let mut rng = Rng::new(seed);
    gaussian_from(&mut rng, shape, mean, std)
}

pub fn gaussian_from<T: Scalar>(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::of(mean + std * rng.normal()))
}

pub fn uniform_from<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::of(lo + (hi - lo) * rng.uniform()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_constant() {
        let t = gaussian_fill::<f32>(&[3, 4], 7, 2.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn same_seed_same_bits() {
        let a = gaussian_fill::<f32>(&[2, 3, 5, 5], 42, 0.0, 1.0).unwrap();
        let b = gaussian_fill::<f32>(&[2, 3, 5, 5], 42, 0.0, 1.0).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = gaussian_fill::<f32>(&[2, 3, 5, 5], 43, 0.0, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn million_samples_have_unit_moments() {
        let t = gaussian_fill::<f64>(&[1_000_000], 5, 0.0, 1.0).unwrap();
        let mean = t.sum() / t.len() as f64;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn below_covers_range() {
        let mut rng = Rng::new(1);
        let mut seen = [0usize; 5];
        for _ in 0..5000 {
            seen[rng.below(5) as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800), "{seen:?}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(9);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
