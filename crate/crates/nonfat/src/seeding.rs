//! Deterministic RNG derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! the run seed plus a purpose tag and up to two counters (epoch, batch).
//! Building the 32-byte key directly from these four words gives each
//! (purpose, counter) combination an independent, platform-stable stream,
//! so shuffles and noise draws never interfere with one another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Purpose {
    Split = 1,
    Shuffle = 2,
    Noise = 3,
    Synth = 4,
    Init = 5,
    Prediction = 6,
}

/// ChaCha8 generator keyed by `(seed, purpose, a, b)`.
pub(crate) fn stream_rng(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
