//! Pinned pseudo-random generation.
//!
//! Every random draw in the crate goes through [`seeded`], which builds a
//! xoshiro256++ generator whose 256-bit state is filled from the 64-bit seed
//! by four successive splitmix64 outputs (`rand_xoshiro`'s `seed_from_u64`).
//! Shuffles are Fisher-Yates as implemented by `rand::seq::SliceRandom`, and
//! sampling without replacement uses `rand::seq::index::sample`; both are
//! pinned through `Cargo.lock`.
//!
//! Independent streams (per stage, per class, per bootstrap resample) are
//! obtained with [`derive_seed`] rather than by sharing a generator.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives a child seed from a parent seed and a label: the first eight
/// bytes (little endian) of `SHA-256(parent_le || label)`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Derives a child seed for a numbered stream (e.g. bootstrap resample `i`).
pub fn stream_seed(parent: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Uniform in `[0, 1)` from the top 53 bits of a 64-bit word.
pub fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
