//! Seeded randomness. ChaCha8 is a counter-based stream cipher, so a given
//! (seed, stream) pair yields the same draws on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream `stream` of `seed`. Consumers that must not
    /// perturb each other (data generation, initialization, shuffling) each
    /// get their own.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Stream ids, kept in one place so no two consumers collide.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const BACKBONE: u64 = 2;
    pub const HEAD: u64 = 3;
    pub const ADAPTER: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const MERGE: u64 = 6;
}
