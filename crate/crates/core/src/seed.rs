//! Seed derivation. Every random stream in the crate is keyed by a hash of
//! its logical coordinates so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN, |acc, &p| {
        splitmix(acc.wrapping_add(GOLDEN) ^ splitmix(p))
    })
}

/// FNV-1a of a string, for use as a [`mix`] component.
pub fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}
