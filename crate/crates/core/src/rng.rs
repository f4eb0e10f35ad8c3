//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`SeededRng`], a thin wrapper
//! over ChaCha8 (`rand_chacha`). The conversions from raw 64-bit words are
//! spelled out here so that a port in another language can reproduce the
//! exact same streams:
//!
//! - the generator for `(seed, stream)` is `ChaCha8Rng::seed_from_u64(seed)`
//!   followed by `set_stream(stream)`;
//! - `uniform()` is `(next_u64() >> 11) * 2^-53`, a value in `[0, 1)`;
//! - `normal()` is Box-Muller on two uniforms `u1, u2` with
//!   `sqrt(-2 ln(1 - u1)) * cos(2π u2)`; the sine half is discarded;
//! - `below(n)` is rejection sampling on `next_u64()` against the largest
//!   multiple of `n` below `2^64`;
//! - `shuffle` is Fisher-Yates from the last index down, using `below(i + 1)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Named sub-streams derived from one user seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const EVAL_ATTACK: u64 = 6;
    pub const GRADCHECK: u64 = 7;
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal deviate.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
