//! Counter-based deterministic randomness keyed by (seed, name).
//!
//! Every random draw in the pipeline flows through [`keyed_rng`], so results
//! depend only on the explicit seed and the name of the consumer, never on
//! creation order or environment entropy.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix a byte string into a 64-bit key, splitmix-style.
fn mix_bytes(seed: u64, name: &str) -> u64 {
    let mut state = splitmix64(seed ^ 0x42ce_2d5c_1b3c_9d1f);
    for chunk in name.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        state = splitmix64(state ^ u64::from_le_bytes(word));
    }
    state
}

/// A ChaCha stream keyed by (seed, name). Identical arguments give an
/// identical stream on every platform.
pub fn keyed_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let key = mix_bytes(seed, name);
    let mut bytes = [0u8; 32];
    let mut s = key;
    for word in bytes.chunks_mut(8) {
        s = splitmix64(s);
        word.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
