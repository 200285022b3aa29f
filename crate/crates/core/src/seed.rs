//! Seed derivation. Every component seed comes from the run's global seed
//! through a chain of labelled hashes:
//!
//! `derive(parent, label) = u64::from_le_bytes(SHA-256(parent.to_le_bytes() ‖ label)[..8])`
//!
//! so e.g. the order of epoch 3 is `derive(derive(global, "train.order"), "3")`.

use sha2::{Digest, Sha256};

pub fn derive(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Applies [`derive`] for each label in turn.
pub fn chain(parent: u64, labels: &[&str]) -> u64 {
    labels.iter().fold(parent, |s, l| derive(s, l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_composes_derive() {
        assert_eq!(chain(7, &["a", "b"]), derive(derive(7, "a"), "b"));
        assert_eq!(chain(7, &[]), 7);
    }

    #[test]
    fn labels_and_parents_separate_streams() {
        assert_ne!(derive(7, "a"), derive(7, "b"));
        assert_ne!(derive(7, "a"), derive(8, "a"));
    }

    #[test]
    fn frozen_value() {
        // First 8 bytes of SHA-256 over 0u64 LE followed by "x".
        let mut h = Sha256::new();
        h.update([0u8; 8]);
        h.update(b"x");
        let d = h.finalize();
        let expected = u64::from_le_bytes(d[..8].try_into().unwrap());
        assert_eq!(derive(0, "x"), expected);
    }
}
