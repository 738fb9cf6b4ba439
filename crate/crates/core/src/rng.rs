//! Seeding helpers. Every random stream in the crate is a ChaCha8 generator
//! whose seed is derived from a user seed plus a fixed key path, so results do
//! not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChainRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a key path into a new 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn derived_rng(seed: u64, keys: &[u64]) -> ChainRng {
    seeded_rng(derive_seed(seed, keys))
}
