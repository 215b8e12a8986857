//! Deterministic, label-addressed random streams.
//!
//! Every concern (optimizer, world, compare, studies) draws from its own
//! ChaCha stream keyed by `SHA-256(seed || label)`, so one module consuming
//! more or fewer draws never shifts another module's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

pub fn derive_stream(seed: u64, label: &[u8]) -> Stream {
    Stream::from_seed(derive_key(seed, label, None))
}

/// Stream for the `index`-th member of a labelled family (e.g. question `j`).
pub fn derive_indexed(seed: u64, label: &[u8], index: u64) -> Stream {
    Stream::from_seed(derive_key(seed, label, Some(index)))
}

/// A 64-bit child seed, for handing to APIs that take a plain seed.
pub fn derive_seed(seed: u64, label: &[u8], index: u64) -> u64 {
    let key = derive_key(seed, label, Some(index));
    u64::from_le_bytes(key[..8].try_into().unwrap())
}

fn derive_key(seed: u64, label: &[u8], index: Option<u64>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label);
    if let Some(i) = index {
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draws(mut s: Stream) -> Vec<u64> {
        (0..100).map(|_| s.random()).collect()
    }

    #[test]
    fn same_seed_and_label_is_identical() {
        assert_eq!(
            draws(derive_stream(42, b"optimizer")),
            draws(derive_stream(42, b"optimizer"))
        );
    }

    #[test]
    fn labels_separate_streams() {
        let a = draws(derive_stream(42, b"optimizer"));
        let b = draws(derive_stream(42, b"world"));
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn seeds_separate_streams() {
        let a = draws(derive_stream(42, b"x"));
        let b = draws(derive_stream(43, b"x"));
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn indexed_family_members_differ() {
        let a = draws(derive_indexed(7, b"q", 0));
        let b = draws(derive_indexed(7, b"q", 1));
        assert_ne!(a, b);
        // label framing: ("ab", none) must not collide with ("a", ...) forms
        assert_ne!(derive_key(1, b"ab", None), derive_key(1, b"a", Some(0x62)));
    }

    #[test]
    fn streams_look_uniform() {
        // smoke test: mean of 10^5 unit draws within 5 sigma of 1/2
        let mut s = derive_stream(9, b"smoke");
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| s.random::<f64>()).sum::<f64>() / n as f64;
        let sigma = (1.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 5.0 * sigma);
    }
}
