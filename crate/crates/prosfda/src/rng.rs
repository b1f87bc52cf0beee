//! Seeded, counter-based random source.
//!
//! Wraps ChaCha8: the stream is a pure function of (seed, stream id, word
//! position), so equal seeds give bit-identical sequences on every platform,
//! independent forks can be handed to parallel workers, and the full state
//! round-trips through checkpoints as three integers.
//!
//! Draw conventions (fixed, part of the reproducibility contract):
//! - `next_f64` maps the top 53 bits of one `u64` onto `[0, 1)`.
//! - `normal` consumes exactly two `u64`s via the Box-Muller transform
//!   (no cached spare, so the word position alone captures the state).

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SeedRng {
    seed: [u8; 32],
    inner: ChaCha8Rng,
}

/// Serializable snapshot of a [`SeedRng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        let inner = ChaCha8Rng::seed_from_u64(seed);
        Self { seed: inner.get_seed(), inner }
    }

    /// Independent generator on `stream`, starting at position zero.
    /// Forks of equal (seed, stream) are identical regardless of how the
    /// parent has advanced.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::from_seed(self.seed);
        inner.set_stream(stream);
        Self { seed: self.seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw (Box-Muller; exactly two u64s consumed).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in `[0, n)`. Modulo bias is below 2^-50 for the
    /// desk-scale `n` used here.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a non-empty range");
        (self.inner.next_u64() % n as u64) as usize
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Result<Self> {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        let restored = Self { seed: state.seed, inner };
        if restored.inner.get_word_pos() != state.word_pos {
            return Err(Error::Format("rng word position failed to restore".into()));
        }
        Ok(restored)
    }
}

/// `batch` distinct indices from `[0, n)` drawn by partial Fisher-Yates;
/// order of draws is part of the reproducibility contract.
pub fn sample_batch_indices(rng: &mut SeedRng, n: usize, batch: usize) -> Vec<usize> {
    assert!(batch >= 1 && batch <= n, "batch size {batch} out of range for {n} items");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..batch {
        let j = i + rng.index(n - i);
        pool.swap(i, j);
    }
    pool.truncate(batch);
    pool
}
