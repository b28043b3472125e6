//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed plus a tuple of stream coordinates (sample id,
//! episode index, ...), so parallel and serial execution draw identical
//! numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(base), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn stream_rng(base: u64, stream: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Stream tags, so that unrelated consumers of the same base seed never
/// share a generator.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const MINIBATCH: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const EPISODE: u64 = 4;
    pub const SCENE: u64 = 5;
    pub const PROPOSALS: u64 = 6;
}
