//! Seeded, splittable random streams.
//!
//! Every stochastic step derives its generator from a master seed plus a
//! small tuple of indices (epoch, batch, item, ...). Work items can then be
//! processed in any order or on any number of workers and still consume
//! exactly the same random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Generator for `seed` alone.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for the stream identified by `seed` and a path of indices.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Stable tag for naming streams by purpose rather than by magic numbers.
pub fn tag(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
