//! Keyed random streams.
//!
//! Every stochastic draw in the crate comes from a stream identified by
//! `(seed, purpose, index)`. Streams are ChaCha8 generators whose key is the
//! run seed and whose stream id is a hash of the purpose tag and index, so two
//! draws never share state unless they share all three parts of the key.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Well-known purpose tags.
pub mod purpose {
    pub const INIT: &str = "init";
    pub const NOISE: &str = "noise";
    pub const TIMESTEP: &str = "timestep";
    pub const BATCH: &str = "batch";
    pub const SCENE: &str = "scene";
    pub const PAIR: &str = "pair";
    pub const MASK: &str = "mask";
    pub const MASK_MODE: &str = "mask-mode";
    pub const WARP: &str = "warp";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Opens the stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: &str, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix(seed ^ (i as u64).wrapping_mul(0xa076_1d64_78bd_642f)).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(splitmix(fnv1a(purpose.as_bytes()) ^ splitmix(index)));
    rng
}

/// Derives a child seed, used when a component needs its own seed value
/// (for example the per-record seed written into a dataset manifest).
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    splitmix(seed ^ splitmix(fnv1a(purpose.as_bytes()) ^ splitmix(index)))
}
