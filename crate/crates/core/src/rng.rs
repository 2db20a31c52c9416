//! Seeded generator streams. Every random consumer derives its own stream from
//! `(seed, label)` so adding a consumer never shifts another one's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

pub fn stream(seed: u64, label: &str) -> LabRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn substream(seed: u64, label: &str, index: u64) -> LabRng {
    stream(seed ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03), label)
}

/// A child seed for APIs that take a plain `u64`.
pub fn derive(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    stream(seed, label).next_u64()
}
