//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tegu_core::cmtpp::{init_projector, ProjectorConfig, ProjectorParams};
use tegu_core::model::{BackboneParams, ModelConfig};
use tegu_core::numerics::ParamTensors;

/// Untrained desk-size backbone and a projector whose down projection is
/// randomized, so the guided path does real work.
pub fn desk_models() -> (BackboneParams, ProjectorParams) {
    let model = ModelConfig::default();
    let backbone = BackboneParams::init(&model).expect("default config is valid");
    let mut projector = init_projector(&ProjectorConfig::default(), model.d_model).expect("valid");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in projector.tensors_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.02..0.02);
            }
        }
    }
    (backbone, projector)
}

/// Two-layer amateur sharing the backbone's vocabulary and width.
pub fn desk_amateur() -> BackboneParams {
    let cfg = ModelConfig {
        n_layers: 2,
        seed: 1,
        ..ModelConfig::default()
    };
    BackboneParams::init(&cfg).expect("valid")
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()
}
