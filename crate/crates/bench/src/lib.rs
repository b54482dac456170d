//! Shared fixtures for the benchmarks.

use aualign::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor from a fixed seed.
pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
