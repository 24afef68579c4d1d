#![allow(dead_code)]

use mode_core::adapters::{init_adapter, Adapter, AdapterConfig, AdapterKind};
use mode_core::seed::{rng_from_seed, SeededRng};
use mode_core::tensor::Matrix;
use rand::Rng;

pub fn rng(seed: u64) -> SeededRng {
    rng_from_seed(seed)
}

/// Adapter of the given family with every trainable entry drawn from
/// `Normal(0, std²)`, so no gradient vanishes by construction.
pub fn random_adapter(kind: AdapterKind, config: &AdapterConfig, std: f64, rng: &mut SeededRng) -> Adapter {
    let mut adapter = init_adapter(kind, config, rng.random()).unwrap();
    for m in adapter.params_mut() {
        *m = Matrix::random_normal(m.rows(), m.cols(), std, rng);
    }
    adapter
}

/// Small random shape with `p | r`.
pub fn random_config(rng: &mut SeededRng, max_dim: usize, max_rank: usize, max_experts: usize) -> AdapterConfig {
    let p_in = rng.random_range(1..=max_dim);
    let q_out = rng.random_range(1..=max_dim);
    let r = rng.random_range(1..=max_rank);
    let divisors: Vec<usize> = (1..=r).filter(|d| r % d == 0).collect();
    let p = divisors[rng.random_range(0..divisors.len())];
    let m = rng.random_range(1..=max_experts);
    AdapterConfig::new(p_in, q_out, r, m, p).unwrap()
}
