//! Counter-based random numbers with platform-stable output.
//!
//! Draw `k` (0-based) of stream `(seed, stream)` is
//!
//! ```text
//! key    = mix64(seed ^ mix64((stream + 1) * STREAM_MUL))
//! out[k] = mix64(key + (k + 1) * GAMMA)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer with multipliers `MIX_A`, `MIX_B`.
//! All arithmetic is wrapping on `u64`, so a given `(seed, stream, k)` maps to
//! the same word on every platform. Independent per-sample streams are derived
//! from `(seed, sample_index)` without sharing state between workers.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::c64;

pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
pub const STREAM_MUL: u64 = 0xD1B5_4A32_D192_ED03;
pub const MIX_A: u64 = 0xBF58_476D_1CE4_E5B9;
pub const MIX_B: u64 = 0x94D0_49BB_1331_11EB;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_A);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_B);
    z ^ (z >> 31)
}

/// Counter-based generator: output depends only on `(key, counter)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let key = mix64(seed ^ mix64(stream.wrapping_add(1).wrapping_mul(STREAM_MUL)));
        Self { key, counter: 0 }
    }

    /// Number of 64-bit words drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Uniform double in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Circularly symmetric complex Gaussian with `E|z|^2 = 1`.
    pub fn complex_normal(&mut self) -> c64 {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let re = self.standard_normal();
        let im = self.standard_normal();
        c64::new(re * s, im * s)
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let word = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&word[..chunk.len()]);
        }
    }
}
