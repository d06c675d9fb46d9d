//! Counter-based random streams.
//!
//! Every consumer derives its generator from `(seed, purpose, indices...)`
//! so results never depend on the order in which streams are drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit tag for a stream purpose.
pub fn tag(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Independent generator for `(seed, purpose, indices)`.
pub fn stream(seed: u64, purpose: &str, indices: &[u64]) -> StreamRng {
    let mut key = splitmix(seed ^ tag(purpose));
    for &i in indices {
        key = splitmix(key ^ splitmix(i));
    }
    let mut bytes = [0u8; 32];
    for (chunk, k) in bytes.chunks_mut(8).zip(0u64..) {
        chunk.copy_from_slice(&splitmix(key.wrapping_add(k)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
