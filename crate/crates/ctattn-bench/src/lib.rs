//! Shared fixtures for the criterion benchmarks.

use ctattn_core::rng;
use ctattn_core::Tensor;

/// Sorted random times on [0, 1] and a matching input matrix.
pub fn attention_instance(n: usize, d_model: usize, seed: u64) -> (Vec<f64>, Tensor) {
    let mut r = rng::stream(seed, "bench-fixture");
    let mut times: Vec<f64> = (0..n)
        .map(|i| (i as f64 + rand::Rng::gen_range(&mut r, 0.1..0.9)) / n as f64)
        .collect();
    times.sort_by(f64::total_cmp);
    let x = Tensor::randn(&[n, d_model], 1.0, &mut r);
    (times, x)
}
