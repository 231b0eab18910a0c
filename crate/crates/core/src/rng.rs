//! Deterministic random streams.
//!
//! Every stochastic component draws from a ChaCha stream derived from the
//! experiment seed plus a purpose tag and an index (for example a user id),
//! so episodes never share state and results are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purpose tags.
pub mod tag {
    pub const WORLD: u64 = 0x01;
    pub const TRAIN_USERS: u64 = 0x02;
    pub const TEST_USERS: u64 = 0x03;
    pub const EPISODE: u64 = 0x04;
    pub const INIT: u64 = 0x05;
    pub const TRAIN: u64 = 0x06;
    pub const EVAL: u64 = 0x07;
    pub const SPLIT: u64 = 0x08;
    pub const PROBE: u64 = 0x09;
    pub const INGEST: u64 = 0x0a;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index);
    ChaCha8Rng::seed_from_u64(s)
}
