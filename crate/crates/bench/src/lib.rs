//! Shared inputs for the benchmarks.

use ndarray::Array2;
use rand::Rng;

use kanrec_core::model::{CfModel, ModelConfig, ModelKind};
use kanrec_core::rng;

/// Binary user rows with roughly `density` of the items set.
pub fn users(batch: usize, items: usize, density: f64, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "bench-users");
    Array2::from_shape_fn((batch, items), |_| if r.random_bool(density) { 1.0 } else { 0.0 })
}

pub fn model(kind: ModelKind, items: usize, latent: usize, lambda: f64) -> CfModel {
    CfModel::build(ModelConfig { kind, item_count: items, latent_dim: latent, lambda, seed: 1, ..ModelConfig::default() })
        .expect("valid benchmark config")
}

/// Scores with a few ties, plus a mask hiding about a tenth of the items.
pub fn ranking_case(items: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng::stream(seed, "bench-rank");
    let scores = (0..items).map(|_| (r.random_range(0.0..1.0f64) * 1e4).round() / 1e4).collect();
    let mask = (0..items).map(|_| r.random_bool(0.1)).collect();
    (scores, mask)
}
