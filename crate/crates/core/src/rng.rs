//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a seed derived from the run seed and a path of indices, so
//! parallel or reordered work never shares a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags, kept distinct so derived seeds never collide across uses.
pub mod stream {
    pub const MODE_CENTERS: u64 = 1;
    pub const PREFERENCES: u64 = 2;
    pub const EPISODES: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const ADAPT: u64 = 6;
    pub const SWITCH: u64 = 7;
    pub const REPLAY: u64 = 8;
    pub const SESSION: u64 = 9;
}
