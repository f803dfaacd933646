//! Hierarchical seed derivation.
//!
//! Every random stream in a run (weight init, batch order, share masks, the
//! triple dealer) is derived from one master seed and a path of labels, so
//! streams are independent of each other and of the order they are created in.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree([u8; 32]);

impl SeedTree {
    pub fn new(master: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"p2n2-seed");
        h.update(master.to_le_bytes());
        SeedTree(h.finalize().into())
    }

    pub fn child(&self, label: &str) -> SeedTree {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        SeedTree(h.finalize().into())
    }

    pub fn child_idx(&self, label: &str, idx: u64) -> SeedTree {
        self.child(label).child(&idx.to_string())
    }

    pub fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.0)
    }

    pub fn bytes(&self) -> [u8; 32] {
        self.0
    }
}
