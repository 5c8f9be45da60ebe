//! Deterministic random number generation.
//!
//! All randomness in the crate flows through [`RngState`] so that identical
//! seeds and call sequences yield identical streams on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A seeded RNG stream with a draw counter.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of draws made so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derive an independent stream keyed by `tag` (same seed + tag → same
    /// derived stream, regardless of this stream's position).
    pub fn derive(&self, tag: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.gen()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        self.rng.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.counter += 1;
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.counter += 1;
        self.rng.gen_range(0..n)
    }

    /// `k` distinct indices out of [0, n), returned in ascending order.
    pub fn sorted_subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut picked = idx[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
