//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a base seed mixed with integer tags, so streams are
//! independent of each other and of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{numel, Array};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Standard-normal samples of the given shape.
pub fn normal_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = numel(shape);
    Array::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

// Stream tags.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_EPOCH: u64 = 2;
pub(crate) const TAG_SAMPLE: u64 = 3;
pub(crate) const TAG_PARTITION: u64 = 4;
pub(crate) const TAG_AUGMENT: u64 = 5;
pub(crate) const TAG_CORPUS: u64 = 6;
pub(crate) const TAG_EVAL: u64 = 7;
