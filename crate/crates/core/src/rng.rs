//! Counter-keyed random streams.
//!
//! Every draw is tied to a `(seed, cycle, step, member)` key so that results
//! do not depend on evaluation order.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags that separate draws made for different purposes.
pub mod tag {
    pub const TRUTH: u64 = 1;
    pub const OBS_NOISE: u64 = 2;
    pub const ENSEMBLE_INIT: u64 = 3;
    pub const FLOW: u64 = 4;
    pub const PERTURBED_OBS: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5851_F42D_4C95_7F2D, |h, &p| splitmix(h ^ splitmix(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(parts))
}

pub fn standard_normal_from<R: rand::Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Standard normal vector of length `n` for the given key.
pub fn standard_normal(parts: &[u64], n: usize) -> DVector<f64> {
    standard_normal_from(&mut stream(parts), n)
}
