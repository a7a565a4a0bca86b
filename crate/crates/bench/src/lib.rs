//! Shared fixtures for the benchmarks under `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qdiffusion::nnet::{Denoiser, DenoiserConfig, ModelParams, QuantumPosition, Tensor};
use qdiffusion::quanv::{BottleneckConfig, QuanvConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn images(rng: &mut ChaCha8Rng, batch: usize, size: usize) -> Tensor {
    Tensor::new(&[batch, size, size, 3], uniform(rng, batch * size * size * 3, -1.0, 1.0)).expect("shape")
}

/// Default 8x8 denoiser with live output weights.
pub fn denoiser(position: QuantumPosition, rng: &mut ChaCha8Rng) -> (Denoiser, ModelParams) {
    let cfg = DenoiserConfig {
        quantum_position: position,
        ..Default::default()
    };
    let bott = BottleneckConfig {
        rho: if position == QuantumPosition::None { 0.0 } else { 0.5 },
        ..Default::default()
    };
    let model = Denoiser::new(cfg, QuanvConfig::default(), bott, 200).expect("valid config");
    let mut params = model.init_params(rng);
    for v in params.get_mut("out.conv.w").expect("output conv").value.data_mut() {
        *v = rng.random_range(-0.1..0.1);
    }
    (model, params)
}
