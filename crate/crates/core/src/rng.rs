//! Seeded randomness. Every stochastic routine takes an explicit seed and
//! derives independent streams from it, so runs are reproducible.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

pub fn rng_from_seed(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Mixes a stream index into a seed (one splitmix finalizer round).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
