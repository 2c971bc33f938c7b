//! Deterministic randomness.
//!
//! Every random draw in the engine flows from one global `u64` seed through
//! named substreams, so stages can be rerun or reordered without perturbing
//! each other. A substream is a ChaCha20 generator keyed by
//! SHA-256(tag || seed || name).

use alloc::vec::Vec;
use rand::distributions::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// The generator handed to every randomized routine in this crate.
pub type Stream = ChaCha20Rng;

/// Derives the substream `name` of a global seed.
///
/// Distinct names yield statistically independent generators; the same
/// (seed, name) pair always yields the same generator.
pub fn substream(seed: u64, name: &str) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(b"cadport.rng.v1");
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// A derived 64-bit seed, for components that take a plain integer
/// seed instead of a generator.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    substream(seed, name).gen()
}

/// One standard normal draw.
#[inline]
pub fn normal(rng: &mut Stream) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Uniform draw from [lo, hi).
#[inline]
pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Samples an index from an unnormalized non-negative weight row by inverse
/// CDF; the final index absorbs any rounding slack.
pub fn categorical(rng: &mut Stream, weights: &[f64]) -> usize {
    debug_assert!(!weights.is_empty());
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// `n` distinct indices in [0, bound) — order of discovery, for small `n`.
pub fn sample_distinct(rng: &mut Stream, bound: usize, n: usize) -> Vec<usize> {
    debug_assert!(n <= bound);
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n {
        let k = rng.gen_range(0..bound);
        if !picked.contains(&k) {
            picked.push(k);
        }
    }
    picked
}
