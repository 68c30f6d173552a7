//! Stable seed derivation. Every random stream in the crate is keyed by a
//! root seed plus a purpose string, so reordering work never shifts values.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from `(seed, purpose)`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let digest = hash_parts(seed, &[purpose]);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// A ChaCha stream keyed by the seed and any number of string parts.
pub fn rng_for(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(hash_parts(seed, parts))
}

fn hash_parts(seed: u64, parts: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        // length prefix keeps ("ab","c") distinct from ("a","bc")
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.finalize().into()
}
