//! Seeded random streams. Every random draw in the crate goes through a
//! [`ChaCha8Rng`] so runs replay bit-identically given the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for item `index` of a run seeded with `seed`.
///
/// Used when work is split per sample so that the result does not depend on
/// how samples are distributed across workers.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}
