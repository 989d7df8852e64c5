//! Seed derivation shared by every stochastic component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream index. Distinct
/// `(parent, index)` pairs give statistically independent streams.
pub fn derive(parent: u64, index: u64) -> u64 {
    splitmix(parent.wrapping_add(GOLDEN.wrapping_mul(index.wrapping_add(1))))
}

/// Fold several indices into one seed.
pub fn derive_all(parent: u64, indices: &[u64]) -> u64 {
    indices.iter().fold(parent, |acc, &i| derive(acc, i))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 64-bit FNV-1a, used where a stable hash of bytes is needed across runs and
/// platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}
