//! Deterministic derivation of independent random streams from a run seed.
//!
//! Every consumer of randomness (model init, guider init, batch order,
//! class sampling, scene layout) draws from its own stream, so enabling
//! one component never shifts the random numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_MODEL_INIT: u64 = 0x6d6f_6465_6c00;
pub const STREAM_GUIDER_INIT: u64 = 0x6775_6964_6572;
pub const STREAM_SOURCE_ORDER: u64 = 0x7372_635f_6f72;
pub const STREAM_TARGET_ORDER: u64 = 0x7467_745f_6f72;
pub const STREAM_MIX: u64 = 0x6d69_7800_0000;
pub const STREAM_LAYOUT: u64 = 0x6c61_796f_7574;
pub const STREAM_RENDER: u64 = 0x7265_6e64_6572;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed together with an ordered list of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
