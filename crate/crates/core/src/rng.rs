//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from a root seed, a stream
//! tag and a list of indices, so that the draws of one stage never depend on
//! how much randomness another stage consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives a 64-bit seed from a root seed, a tag and indices.
pub fn derive_seed(root: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ tag_hash(tag));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i));
    }
    h
}

pub fn stream(root: u64, tag: &str, indices: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, tag, indices))
}
