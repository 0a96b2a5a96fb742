//! Seed derivation. Every random stream in the simulator is keyed by the run
//! seed plus a purpose tag and coordinates (round, client, class, ...), so that
//! results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 0x01;
pub const TAG_SAMPLE: u64 = 0x02;
pub const TAG_TRAIN: u64 = 0x03;
pub const TAG_WARMUP: u64 = 0x04;
pub const TAG_PERSONALIZE: u64 = 0x05;
pub const TAG_CENTERS: u64 = 0x10;
pub const TAG_SAMPLES: u64 = 0x11;
pub const TAG_HOLDOUT: u64 = 0x12;
pub const TAG_PARTITION: u64 = 0x13;
pub const TAG_SPLIT: u64 = 0x14;
pub const TAG_UNSEEN: u64 = 0x15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a tag and a list of coordinates into a new seed.
pub fn derive(seed: u64, tag: u64, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(tag));
    for &c in coords {
        h = splitmix64(h ^ c.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn stream(seed: u64, tag: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, coords))
}
