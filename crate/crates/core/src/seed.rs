//! Named seed substreams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose seed is
//! derived by hashing a parent seed with a label, so phases stay reproducible
//! on their own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    derive(derive(seed, label), &index.to_string())
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, label: &str) -> Rng {
    rng(derive(seed, label))
}
