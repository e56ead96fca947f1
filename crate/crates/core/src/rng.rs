//! Seeded random streams.
//!
//! Every run derives its randomness from one global seed. Components draw
//! from named sub-streams so each can be reproduced on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a seed with an integer key.
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    mix(mix(seed) ^ key)
}

/// Seed of the named sub-stream of `seed` (e.g. "corpus", "init").
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name keeps the mapping stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    derive_seed(seed, h)
}

pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(stream_seed(seed, name))
}

pub fn keyed(seed: u64, key: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, key))
}
