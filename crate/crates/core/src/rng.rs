//! Seeded random streams.
//!
//! All randomness in the crate comes from ChaCha8 keyed by the run seed, with
//! independent consumers selecting distinct stream ids. ChaCha is counter
//! based, so a `(seed, stream)` pair always yields the same sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream ids for the crate's independent consumers. Per-item streams are
/// derived by adding an index to a base.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const EVAL_NOISE: u64 = 5;
    pub const TRAJECTORY: u64 = 1 << 32;
    pub const SUBSAMPLE: u64 = 2 << 32;
    pub const CONDITION: u64 = 3 << 32;
    pub const CASE_NOISE: u64 = 4 << 32;
    pub const EPOCH: u64 = 5 << 32;
    pub const STEP_NOISE: u64 = 6 << 32;
    pub const STEP_SPLIT: u64 = 7 << 32;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream keyed by a string (e.g. a case id) under a per-item base, so
/// the draw for an item does not depend on its position in a collection.
pub fn keyed(seed: u64, base: u64, key: &str) -> Rng {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(key.as_bytes());
    let mut low = [0u8; 4];
    low.copy_from_slice(&digest[..4]);
    stream(seed, base + u64::from(u32::from_le_bytes(low)))
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
