//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a [`ChaCha8Rng`] whose
//! seed is derived from a base seed and a list of integer keys (sample size,
//! replicate index, stream purpose). Results therefore depend only on the
//! keys, never on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Stream purposes, used as the last derivation key.
pub mod purpose {
    pub const SIGNAL: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const ENSEMBLE: u64 = 3;
    pub const CREDIBLE: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `keys` into `seed`.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

pub fn standard_normals(rng: &mut StreamRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
