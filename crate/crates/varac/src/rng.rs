//! Seedable, splittable randomness.
//!
//! Every stochastic operation in this crate takes an explicit `u64` seed and
//! builds its own [`Rng`] from it. Independent streams are derived from a
//! parent seed with [`split`], which mixes the parent seed with a caller-chosen
//! tag through the SplitMix64 finalizer; distinct tags give statistically
//! independent streams and the derivation is stable across platforms.

use rand_chacha::ChaCha12Rng;

pub use rand::Rng as RngCore;
use rand::SeedableRng;

/// The generator used throughout the crate.
pub type Rng = ChaCha12Rng;

/// Builds the canonical generator for `seed`.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Derives a child seed from `(seed, tag)`.
pub fn split(seed: u64, tag: u64) -> u64 {
    // SplitMix64 finalizer over the xor of seed and a tag offset by an odd
    // constant, so split(s, 0) != s in general.
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x1);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws an index from an unnormalized (or normalized) nonnegative weight row
/// by inverse-CDF. The caller guarantees the weights sum to something positive.
pub fn sample_index(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding can push u past the last partial sum; return the last index
    // with positive weight.
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}
