//! Seed plumbing. Every random stream is a ChaCha8 generator keyed by a seed
//! derived from a parent seed and a counter, so generation order never
//! affects results.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Shape4, Tensor};

pub type Rng64 = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `(tag, index)` of `parent`.
pub fn derive_seed(parent: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ splitmix64(tag)).wrapping_add(index))
}

pub fn stream(parent: u64, tag: u64, index: u64) -> Rng64 {
    Rng64::seed_from_u64(derive_seed(parent, tag, index))
}

/// Uniform `(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Real>(rng: &mut Rng64, shape: Shape4, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(-bound..bound)))
}
