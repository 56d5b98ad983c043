//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every random decision in the crate draws from a [`Stream`] built from a
//! master seed and a tuple of integer tags (iteration, batch index, query
//! index, ...). Streams derived from distinct tag tuples are independent, so
//! work can be scheduled on any number of threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Tags separating the purposes a master seed is used for.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const EPISODE: u64 = 4;
    pub const FINETUNE: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const RESTRICT: u64 = 7;
    pub const SUPERVISED: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a sequence of tags into a child seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(master: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
