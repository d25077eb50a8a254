//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdb_core::diffcore::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `[n, d]` tensor of uniform draws in `[-scale, scale)`.
pub fn uniform(n: usize, d: usize, scale: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-scale..scale)).collect())
        .expect("shape matches data")
}

/// Evenly spaced diffusion times in `(0, 1)`.
pub fn times(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}
