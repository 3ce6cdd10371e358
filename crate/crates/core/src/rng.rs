//! Named, reproducible random substreams.
//!
//! Every consumer of randomness asks for a stream keyed by the master seed and a
//! tag path such as `(realization, role, step)`. Keys are hashed into a ChaCha
//! seed, so streams with different tags are independent and a stream never
//! depends on how many numbers another stream has drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Roles used as the second tag of a substream.
pub mod role {
    pub const TRUTH: u64 = 1;
    pub const OBSERVATION: u64 = 2;
    pub const PRINCIPAL_INIT: u64 = 3;
    pub const ANCILLARY_INIT: u64 = 4;
    pub const PRINCIPAL_PERTURBATION: u64 = 5;
    pub const ANCILLARY_PERTURBATION: u64 = 6;
    pub const TRAIN_INIT: u64 = 7;
    pub const TRAIN_SHUFFLE: u64 = 8;
    pub const TRAIN_SPLIT: u64 = 9;
}

pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"mfenkf-substream");
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}
