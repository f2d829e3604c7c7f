//! Seeded random streams.
//!
//! Every random draw in training and generation comes from a ChaCha stream
//! selected by `(seed, purpose, index)`, so a step or a sample can be replayed
//! without replaying everything before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes that select independent streams under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    ModulationStep = 2,
    DiffusionStep = 3,
    FinetuneStep = 4,
    Sample = 5,
    Dataset = 6,
    Evaluation = 7,
    Crop = 8,
}

pub fn substream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
