//! Seeded random streams.
//!
//! Every stochastic step draws from its own ChaCha8 stream whose seed is
//! derived from the master seed, a stream tag and an index. Streams therefore
//! never share state, and reordering one consumer cannot perturb another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of stream `tag`, entry `index`, under `master`.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
}

pub fn derived(master: u64, tag: u64, index: u64) -> Rng {
    seeded(derive_seed(master, tag, index))
}
