//! Seeded random source shared by initialization, batching and sampling.
//!
//! The stream is fully specified so runs can be reproduced without a
//! checkpoint:
//!
//! * engine: SplitMix64 (Vigna's reference mixer) with the seed as the raw
//!   64-bit state;
//! * `uniform()`: top 53 bits of the next word, scaled into `[0, 1)`;
//! * `normal()`: Box–Muller on two fresh uniforms `u1, u2`, returning
//!   `sqrt(-2 ln(1 - u1)) * cos(2π u2)` (the sine branch is discarded);
//! * `below(n)`: `(next_u64 * n) >> 64` (multiply-shift reduction).

use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: SplitMix64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from this seed and a fixed tag.
    pub fn derive(seed: u64, tag: u64) -> Self {
        let mut mix = Rng::new(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        Rng::new(mix.next_u64())
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below requires n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal_vec<T: Real>(&mut self, len: usize, std: f64) -> Vec<T> {
        (0..len).map(|_| T::of(self.normal() * std)).collect()
    }

    pub fn uniform_vec<T: Real>(&mut self, len: usize, lo: f64, hi: f64) -> Vec<T> {
        (0..len)
            .map(|_| T::of(lo + (hi - lo) * self.uniform()))
            .collect()
    }
}
