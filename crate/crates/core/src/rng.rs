//! Deterministic RNG streams. Every source of randomness in the crate is a
//! ChaCha8 stream derived from a base seed plus a stream index, so parallel
//! and serial execution of independent units (trajectories, work items)
//! produce identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Root stream for a run.
pub fn seed_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `index` of `seed`. ChaCha8 exposes 2^64 streams per
/// key, so this never aliases the root stream state.
pub fn derive_rng(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}
