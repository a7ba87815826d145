//! Splittable seed derivation.
//!
//! A derived seed is the first eight bytes (little endian) of
//! `SHA-256("lot-seed-v1" || master as u64 LE || label bytes)`. Labels are
//! slash-separated paths such as `teacher/init` or `student/2/init`; adding a
//! new label never changes the seeds of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const DOMAIN: &[u8] = b"lot-seed-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn derive(&self, label: &str) -> u64 {
        derive_seed(self.master, label)
    }

    /// Subtree rooted at the seed derived for `label`.
    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree::new(self.derive(label))
    }

    pub fn rng(&self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(label))
    }
}

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
