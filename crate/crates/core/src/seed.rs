//! Seeded random streams.
//!
//! All randomness flows through ChaCha8 generators. A run-level integer seed
//! is expanded into independent streams per purpose by hashing
//! `seed || 0x00 || label` with SHA-256 and taking the first eight bytes
//! (little endian) as the ChaCha seed. Labels are short strings such as
//! `"demos"` or `"points/LOC"`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a sub-seed for `label` from `seed`.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Generator seeded directly from `seed`.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for the `label` stream of `seed`.
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    rng(derive(seed, label))
}
