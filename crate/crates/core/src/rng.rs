//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha8 stream from a
//! `(seed, stream)` pair, so results never depend on scheduling or on how
//! many workers run in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream index into a new 64-bit seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// FNV-1a over the bytes of a string; used to key streams by record id.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn stream(seed: u64, stream: u64) -> DetRng {
    DetRng::seed_from_u64(derive_seed(seed, stream))
}

pub fn stream_for(seed: u64, key: &str) -> DetRng {
    stream(seed, hash_str(key))
}
