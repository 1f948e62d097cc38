//! Counter-keyed random streams.
//!
//! Every draw in the crate comes from a ChaCha stream whose 256-bit key is
//! `(seed, purpose, step, index)`, so particle `p`'s numbers at step `n` are
//! fixed by the seed alone and do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    InitialSample = 1,
    BrownianIncrement = 2,
    Synthetic = 3,
}

pub fn stream(seed: u64, purpose: Purpose, step: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
