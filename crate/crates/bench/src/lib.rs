//! Deterministic fixtures for the criterion benches.

use c2f_core::Tensor;

/// Pseudo-random values in [-1, 1] from a fixed formula, cheap and repeatable.
pub fn pattern(shape: &[usize], phase: f32) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f32 * 12.9898 + phase).sin() * 43758.547).fract())
}

/// `n` points of dimension `dim` around three well-separated centers.
pub fn clustered_points(n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|i| {
            let center = (i % 3) as f32 * 10.0;
            (0..dim)
                .map(|d| center + ((i * dim + d) as f32 * 0.618).sin())
                .collect()
        })
        .collect()
}
