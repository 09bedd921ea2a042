//! Counter-based randomness keyed by `(seed, instance_id, purpose)`.
//!
//! Every random draw in the crate goes through [`keyed_rng`], so results never
//! depend on evaluation order or on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Purpose tags used as part of the key.
pub mod purpose {
    pub const SHAPLEY_PERMUTATIONS: &str = "shapley-permutations";
    pub const RANDOM_ATTRIBUTION: &str = "random-attribution";
    pub const RANDOM_BASELINE: &str = "random-baseline";
    pub const SUBSAMPLE: &str = "subsample";
    pub const SYNTH: &str = "synth";
}

/// Deterministic generator for one `(seed, key, purpose)` triple.
pub fn keyed_rng(seed: u64, key: &str, purpose: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((key.len() as u64).to_le_bytes());
    hasher.update(key.as_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
