//! Derived random streams.
//!
//! Every random decision in the crate flows from one master seed. Sub-streams
//! are keyed by a hash of the master seed and a label path, so the stream a
//! dialogue sees does not depend on how work is sharded or scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Hashes `master` together with `labels` into a 64-bit stream seed.
pub fn derive(master: u64, labels: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn rng(master: u64, labels: &[&[u8]]) -> Rng {
    Rng::seed_from_u64(derive(master, labels))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_length_prefixed() {
        assert_ne!(derive(1, &[b"ab", b"c"]), derive(1, &[b"a", b"bc"]));
        assert_eq!(derive(1, &[b"ab", b"c"]), derive(1, &[b"ab", b"c"]));
        assert_ne!(derive(1, &[b"x"]), derive(2, &[b"x"]));
    }
}
