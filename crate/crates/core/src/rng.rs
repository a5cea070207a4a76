//! Keyed random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream whose key is derived from
//! `(run seed, tags...)`, e.g. `(seed, round, device, purpose)`. Streams for
//! different keys are independent, so per-device work gives the same result
//! regardless of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes, used as the last key component.
pub mod purpose {
    pub const QUANTIZE: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const INIT: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const DATA: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const SELECT: u64 = 7;
    pub const REFERENCE: u64 = 8;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 256-bit ChaCha key from a seed and a list of tags.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &tag in tags {
        let mut s = acc ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        acc = splitmix64(&mut s) ^ splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    let mut s = acc;
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
