//! Seeded random streams.
//!
//! Every random draw in the crate flows from an explicit u64 seed through
//! ChaCha8, with domain-separated substreams so parallel generation (one
//! stream per sample) cannot change results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream domains; keeps sample streams, init streams and shuffle
/// streams from ever colliding.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Sample = 1,
    ParamInit = 2,
    Shuffle = 3,
    Split = 4,
    Test = 5,
}

/// An independent generator for (seed, stream, index).
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn root(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
