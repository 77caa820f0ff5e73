//! Seed derivation. Every random stream in the crate is a ChaCha8 stream
//! keyed by a 64-bit seed; named streams mix in a stable hash of the name.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit hash of a string (first 8 bytes of its SHA-256, little endian).
pub fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// `seed ⊕ hash(name)`.
pub fn named_seed(seed: u64, name: &str) -> u64 {
    seed ^ name_hash(name)
}

pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    stream(named_seed(seed, name))
}
