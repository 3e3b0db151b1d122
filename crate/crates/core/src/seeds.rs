//! Seed derivation.
//!
//! Every random stream in the crate is keyed by a path of integers hashed
//! down from a master seed, so a value depends only on its logical position
//! (replication, observation, draw) and never on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `seed` and a path of tags.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive(seed, path))
}

/// Named tags so call sites read as paths rather than magic numbers.
pub mod tag {
    pub const SHUFFLE: u64 = 1;
    pub const GENERATOR: u64 = 2;
    pub const REGRESSOR: u64 = 3;
    pub const SCORING: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
    pub const DATA: u64 = 6;
    pub const REPLICATION: u64 = 7;
    pub const ORACLE: u64 = 8;
    pub const BANDWIDTH: u64 = 9;
}
