//! Deterministic seed derivation.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a user seed,
//! a purpose tag and an index, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for [`substream`].
pub mod purpose {
    pub const GEOMETRY: u64 = 0x01;
    pub const DATASET: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const TRAIN: u64 = 0x04;
    pub const WEAK_INIT: u64 = 0x05;
    pub const SAMPLE_NOISE: u64 = 0x06;
    pub const SDE_NOISE: u64 = 0x07;
    pub const ERROR_CURVE: u64 = 0x08;
    pub const EVAL: u64 = 0x09;
    pub const FLOOR: u64 = 0x0a;
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(purpose)));
    rng.set_stream(index);
    rng
}
