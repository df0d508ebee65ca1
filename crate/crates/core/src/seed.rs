//! Stable seed derivation.
//!
//! Every random stream in the crate is keyed from a user seed plus a
//! context (a string tag, an epoch, a sample id). The mixing is a fixed
//! splitmix64 / FNV-1a construction so streams never depend on the
//! standard library's hasher, which is not stable across releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from `seed` and a textual tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(tag.as_bytes())))
}

/// Derives a child seed from `seed`, a numeric index and a textual tag.
pub fn derive_indexed(seed: u64, index: u64, tag: &str) -> u64 {
    derive(splitmix64(seed.wrapping_add(splitmix64(index))), tag)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
