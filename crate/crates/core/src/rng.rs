//! Seeded random streams.
//!
//! Every stochastic component draws from a [`Stream`] derived from a run seed
//! plus a label (sample id, purpose). Derivation hashes the pair so streams for
//! distinct labels are independent and do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Stream seeded directly from an integer.
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream derived from `(seed, label)`.
pub fn derive(seed: u64, label: &str) -> Stream {
    ChaCha8Rng::from_seed(derive_key(seed, label))
}

pub fn derive_key(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// Sub-seed for handing to another seeded component.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let key = derive_key(seed, label);
    u64::from_le_bytes(key[..8].try_into().unwrap())
}
