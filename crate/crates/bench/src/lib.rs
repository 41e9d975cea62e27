//! Shared fixtures for the benchmarks.

use pseudoseg::netops::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A tensor of uniform values in `[-1, 1)` from a fixed seed.
pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}
