//! Seed derivation tree.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a parent
//! seed and a path of labels/indices, so results never depend on the order in
//! which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from `parent` and a textual label.
pub fn derive(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Derives a child seed from `parent`, a label and an integer index.
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0xff]);
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child(parent: u64, label: &str) -> Rng {
    rng(derive(parent, label))
}

pub fn child_indexed(parent: u64, label: &str, index: u64) -> Rng {
    rng(derive_indexed(parent, label, index))
}
