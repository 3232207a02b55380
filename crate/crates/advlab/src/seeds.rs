//! Deterministic seed derivation.
//!
//! Every pipeline stage derives its own RNG seed from the experiment
//! seed and a stage label by hashing, so stages are statistically
//! decoupled (changing the corpus seed does not shift the attack
//! noise) while the whole run stays reproducible from one integer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// Deterministic RNG for a derived seed.
pub fn seeded_rng(parent: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label))
}

/// Per-item RNG (e.g. one attack or one utterance), decorrelated from
/// its neighbours so items can be processed in any order.
pub fn indexed_rng(parent: u64, label: &str, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(parent, label), &index.to_string()))
}
