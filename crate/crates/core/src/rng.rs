//! Seeded random streams.
//!
//! Every stochastic step in the crate draws from a [`SimRng`] derived from an
//! experiment seed and a short path of tags, so independent workers (nodes,
//! samples, sweep cells) never share a stream and results do not depend on
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags used across the crate.
pub mod tag {
    pub const GEOMETRY: u64 = 0x6765_6f6d;
    pub const TOPOLOGY: u64 = 0x746f_706f;
    pub const DATA: u64 = 0x6461_7461;
    pub const INIT: u64 = 0x696e_6974;
    pub const NODE: u64 = 0x6e6f_6465;
    pub const SWEEP: u64 = 0x7377_6570;
    pub const TRAIN: u64 = 0x7472_6169;
    pub const TEST: u64 = 0x7465_7374;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed and a tag path into a single 64-bit stream key.
pub fn derive_key(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Returns an independent stream for `(seed, tags...)`.
pub fn substream(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_key(seed, tags))
}
