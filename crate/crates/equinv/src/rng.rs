//! Seed derivation. Every stochastic component draws from its own ChaCha
//! stream derived from the top-level seed plus a tag path, so results do
//! not depend on the order in which components consume randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable domain tags for derived streams.
pub mod domain {
    pub const MODEL_INIT: u64 = 1;
    pub const BANK_INIT: u64 = 2;
    pub const EPOCH_SHUFFLE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const NEGATIVES: u64 = 5;
    pub const EPISODE: u64 = 6;
    pub const SYNTH_DATA: u64 = 7;
    pub const TRANSFORM_SUBSET: u64 = 8;
}

// splitmix64 finalizer; good avalanche for combining tag paths.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a generator from `seed` and a tag path, e.g.
/// `[domain::EPOCH_SHUFFLE, generation, epoch]`.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = mix(seed ^ 0x6a09_e667_f3bc_c908);
    for &t in tags {
        h = mix(h ^ t);
    }
    ChaCha8Rng::seed_from_u64(h)
}
