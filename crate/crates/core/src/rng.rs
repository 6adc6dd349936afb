//! Counter-based random numbers.
//!
//! Every draw is addressed by `(seed, stream, index)`: the generator is
//! ChaCha8 keyed by the seed, with the 64-bit stream id selecting an
//! independent keystream and the word position acting as the draw counter.
//! Output therefore does not depend on evaluation order, platform or thread
//! count; two generators built from the same key produce the same sequence.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream domains. Mixed into stream ids so that, say, the mask stream for
/// layer 1 never coincides with the batch stream for step 1.
pub mod domain {
    pub const INIT: u64 = 0x494e_4954;
    pub const MASK: u64 = 0x4d41_534b;
    pub const BATCH: u64 = 0x4241_5443;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const UNIT_ORDER: u64 = 0x554e_4954;
}

/// SplitMix64 finalizer; used to fold structured keys into one stream id.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of key parts into a single stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6472_6f70_6c61_62u64, |acc, &p| mix64(acc ^ p))
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
        Self { seed, stream, inner }
    }

    /// Generator whose stream id is derived from structured key parts,
    /// e.g. `[domain::MASK, layer, step, sample]`.
    pub fn keyed(seed: u64, parts: &[u64]) -> Self {
        Self::new(seed, stream_id(parts))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Draw counter, in 32-bit keystream words.
    pub fn cursor(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_cursor(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        order
    }
}
