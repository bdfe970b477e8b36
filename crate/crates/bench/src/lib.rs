//! Fixtures shared by the criterion benches.

use mmembed_core::index::{Metric, VectorSet};
use mmembed_core::rng::SplitMix64;

/// `n` Gaussian rows of width `dim`, flattened.
pub fn gaussian_rows(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = SplitMix64::new(seed);
    (0..n * dim).map(|_| rng.next_gaussian() as f32).collect()
}

pub fn vector_set(metric: Metric, n: usize, dim: usize, seed: u64) -> VectorSet {
    let ids = (0..n).map(|i| format!("r{i:07}")).collect();
    VectorSet::new(metric, dim, ids, &gaussian_rows(n, dim, seed)).expect("valid fixture")
}

/// Pink/white RGB tile with the left `tissue_cols` columns stained.
pub fn tile(size: usize, tissue_cols: usize) -> Vec<u8> {
    let mut px = Vec::with_capacity(size * size * 3);
    for _ in 0..size {
        for x in 0..size {
            px.extend_from_slice(if x < tissue_cols { &[210, 120, 170] } else { &[250, 250, 252] });
        }
    }
    px
}
