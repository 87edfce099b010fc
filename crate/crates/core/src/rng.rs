//! Labeled, splittable random streams.
//!
//! A [`SeedTree`] node is a 256-bit key. Children are derived by hashing the
//! parent key with a label, and each node hands out independent ChaCha
//! streams indexed by an integer. Work split into fixed-size chunks therefore
//! draws the same numbers regardless of how many threads process it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Number of samples handled by one random stream in chunked generation.
pub const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedTree {
    key: [u8; 32],
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"mixdiff-root");
        h.update(seed.to_le_bytes());
        SeedTree { key: h.finalize().into() }
    }

    /// Child node for a named stage.
    pub fn split(&self, label: &str) -> SeedTree {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        SeedTree { key: h.finalize().into() }
    }

    /// Child node for an integer index (trial number, time step, ...).
    pub fn split_index(&self, index: u64) -> SeedTree {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"#");
        h.update(index.to_le_bytes());
        SeedTree { key: h.finalize().into() }
    }

    /// Independent generator number `stream` of this node.
    pub fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(stream);
        rng
    }

    pub fn rng(&self) -> ChaCha8Rng {
        self.stream(0)
    }

    /// A u64 seed for APIs that take one, derived from this node's key.
    pub fn seed_u64(&self) -> u64 {
        u64::from_le_bytes(self.key[..8].try_into().unwrap())
    }
}
