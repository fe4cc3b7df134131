//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stat_core::autodiff::Tensor;
use stat_core::model::TokenizerConfig;

/// The desk-scale tokenizer used throughout the benches.
pub fn bench_config() -> TokenizerConfig {
    TokenizerConfig {
        hidden_dim: 64,
        enc_layers: 2,
        dec_layers: 2,
        patch_size: 8,
        prob_head_hidden: 64,
        ..TokenizerConfig::default()
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
