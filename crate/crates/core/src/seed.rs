//! Counter-based random streams derived from one master seed.
//!
//! Every consumer (data generation, partitioning, per-client training in a
//! given round, ...) gets its own stream keyed by a purpose tag and a pair of
//! counters, so the order in which clients execute never changes what any of
//! them draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Purposes for [`stream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    ClassMeans,
    Samples,
    Rotation,
    Partition,
    Split,
    Holdout,
    Budgets,
    ModelInit,
    GateInit,
    Sampling,
    Local,
    FineTune,
    NovelAdapt,
}

impl Purpose {
    fn tag(self) -> u8 {
        self as u8
    }
}

/// A ChaCha stream seeded by `sha256(master ‖ purpose ‖ a ‖ b)`.
pub fn stream(master: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([purpose.tag()]);
    hasher.update(a.to_le_bytes());
    hasher.update(b.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
