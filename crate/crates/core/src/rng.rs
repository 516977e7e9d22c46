//! Seed fan-out. Every random stream in the crate is a ChaCha8 generator
//! whose seed is derived from a parent seed and a stream label, so that
//! one global seed determines every draw regardless of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `(parent, label)`.
pub fn derive(parent: u64, label: &str) -> u64 {
    mix64(parent ^ mix64(hash_label(label)))
}

/// Derive a child seed from `(parent, index)`.
pub fn derive_index(parent: u64, index: u64) -> u64 {
    mix64(parent.wrapping_add(mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn rng_for(parent: u64, label: &str) -> Rng {
    rng(derive(parent, label))
}

pub fn normal_vec(rng: &mut Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
