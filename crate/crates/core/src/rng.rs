//! Deterministic, platform-independent random streams.
//!
//! Every stream is a ChaCha8 keystream (`rand_chacha::ChaCha8Rng`) keyed by a
//! 64-bit seed (expanded with `SeedableRng::seed_from_u64`) and selected by a
//! 64-bit stream index. ChaCha is a counter-based generator defined purely on
//! 32-bit integer arithmetic, so `(seed, stream)` fixes the sequence on every
//! platform. Uniform floats take the top 53 bits of one `u64` draw.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream families. Distinct families never share a keystream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum StreamKind {
    Data = 1,
    Init = 2,
    Sampling = 3,
    Batching = 4,
    MonteCarlo = 5,
    Split = 6,
}

impl StreamKind {
    /// Stream index for sub-stream `index` of this family.
    pub fn index(self, index: u32) -> u64 {
        ((self as u64) << 32) | index as u64
    }
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn for_kind(seed: u64, kind: StreamKind, index: u32) -> Self {
        Self::new(seed, kind.index(index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with a full 53-bit mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.gen_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
