//! Seed derivation.
//!
//! A single user seed feeds every stochastic stage. Each stage derives its
//! own stream from `(seed, stage name)`, so adding or removing a stage never
//! shifts the random sequence seen by the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit sub-seed for a named stage.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, then mixed with the parent seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(seed) ^ h)
}

/// A ChaCha stream keyed by `(seed, stage)`.
pub fn stage_rng(seed: u64, stage: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage))
}
