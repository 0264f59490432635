//! Deterministic stream derivation. Every random draw in the crate comes
//! from a ChaCha8 stream whose key is a SHA-256 digest of (seed, purpose,
//! index), so independent streams can be re-derived at any point: the same
//! seed reproduces initialization, shuffles, and augmentation bit-exactly,
//! and resuming at an epoch boundary regenerates that epoch's stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Stream that initializes one named parameter tensor. Keyed by name, not
/// by draw order, so re-initializing a single layer (head replacement)
/// reproduces exactly what a fresh build would draw for it.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    derive_rng(seed, &format!("param/{name}"), 0)
}

/// Stream for one training epoch: shuffle first, then per-sample
/// augmentation draws in batch order.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    derive_rng(seed, "epoch", epoch as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut r1 = derive_rng(7, "x", 0);
        let mut r2 = derive_rng(7, "x", 0);
        assert_eq!(r1.next_u64(), r2.next_u64());

        let mut r3 = derive_rng(7, "x", 1);
        let mut r4 = derive_rng(7, "y", 0);
        let mut r5 = derive_rng(8, "x", 0);
        let base = derive_rng(7, "x", 0).next_u64();
        assert_ne!(base, r3.next_u64());
        assert_ne!(base, r4.next_u64());
        assert_ne!(base, r5.next_u64());
    }
}
