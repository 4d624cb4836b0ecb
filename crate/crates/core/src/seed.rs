//! Deterministic seed derivation. Every random stream in the crate is a
//! ChaCha8 generator seeded from a base seed mixed with stream coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`; distinct coordinate tuples give unrelated seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags keep seeds of different consumers apart.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const PROPOSALS: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EVAL_SCENE: u64 = 5;
    pub const EVAL_PROPOSALS: u64 = 6;
}
