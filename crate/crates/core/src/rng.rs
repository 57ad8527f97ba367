//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a base seed mixed with a stream index, so streams never
//! depend on how many draws another stream made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Hashes `(seed, index)` into a new 64-bit seed (splitmix64 finalizer).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, index))
}
