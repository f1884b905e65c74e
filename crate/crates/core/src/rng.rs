//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! the global seed plus a tuple of stream coordinates (scenario, timestep,
//! worker, ...). ChaCha is counter based, so a stream's output depends only
//! on its key.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same coordinates apart.
pub mod tag {
    pub const INIT: u64 = 0x1;
    pub const SCENARIO: u64 = 0x2;
    pub const ROLLOUT: u64 = 0x3;
    pub const K_DRAW: u64 = 0x4;
    pub const RANDOM_SELECTOR: u64 = 0x5;
    pub const EPISODE: u64 = 0x6;
    pub const CORPUS: u64 = 0x7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and stream coordinates into one 64-bit key.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &p in parts {
        state ^= p.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        acc ^= splitmix64(&mut state);
        state = acc;
    }
    acc
}

pub fn stream(seed: u64, parts: &[u64]) -> StreamRng {
    let mut state = mix(seed, parts);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
