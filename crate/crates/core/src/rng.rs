//! Seed derivation and random-number helpers.
//!
//! Every stochastic component draws from its own `ChaCha8Rng` seeded through
//! [`derive_seed`], so parallel execution never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a base seed together with an ordered list of stream identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

// Stream tags used with `derive_seed`.
pub(crate) const TAG_SELECT: u64 = 0x5e1ec7;
pub(crate) const TAG_CLIENT: u64 = 0xc11e47;
pub(crate) const TAG_EVAL: u64 = 0xe7a1;
pub(crate) const TAG_INIT: u64 = 0x1417;
pub(crate) const TAG_PARTITION: u64 = 0x9a27;
pub(crate) const TAG_CALIB: u64 = 0xca11b;
pub(crate) const TAG_CENTRAL: u64 = 0xce47;
