//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit generator. Work that may run in
//! parallel (patients, bootstrap replicates) derives an independent stream
//! from `(seed, index)` so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream `index` under `seed`.
pub fn derived(seed: u64, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
