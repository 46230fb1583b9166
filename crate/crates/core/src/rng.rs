//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit generator. Streams used by
//! experiments are derived from `(master seed, purpose label, index)` through
//! SHA-256 so that trials can run in any order, on any number of threads, and
//! still see the same randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used throughout the crate.
pub type SeededRng = ChaCha8Rng;

/// Derives the 32-byte seed of the stream `(master, label, index)`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

/// Opens the stream `(master, label, index)`.
pub fn stream(master: u64, label: &str, index: u64) -> SeededRng {
    SeededRng::from_seed(derive_seed(master, label, index))
}

/// A generator seeded directly from a `u64`, for one-off use.
pub fn from_seed(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}
