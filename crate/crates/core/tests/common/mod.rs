#![allow(dead_code)]

use favla::fast_expert::FastModelConfig;
use favla::force_features::TcnConfig;
use favla::model::{Batch, ModelConfig};
use favla::numerics::{ParamStore, Tensor};
use favla::slow_context::SlowModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| scale * rng.gen_range(-1.0..1.0)).collect(),
    )
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        slow: SlowModelConfig {
            layers: 2,
            width: 16,
            heads: 2,
            mlp_hidden: 16,
            cameras: 2,
            vision_dim: 5,
            vision_tokens: 2,
            tasks: 2,
            variance_hidden: [8, 4],
            tcn: TcnConfig {
                width: 8,
                kernel: 3,
                dilations: vec![1, 2],
                tokens: 2,
                window: 6,
            },
            ..SlowModelConfig::default()
        },
        fast: FastModelConfig {
            layers: 2,
            width: 12,
            heads: 2,
            adapter_width: 8,
            mlp_hidden: 12,
            horizon: 4,
            time_features: 4,
            ..FastModelConfig::default()
        },
    }
}

pub fn random_batch(cfg: &ModelConfig, b: usize, rng: &mut ChaCha8Rng) -> Batch {
    let tau = cfg.slow.tcn.window;
    Batch {
        vision: random_tensor(rng, b * cfg.slow.cameras, cfg.slow.vision_dim, 1.0),
        tasks: (0..b).map(|i| i % cfg.slow.tasks).collect(),
        state: random_tensor(rng, b, 7, 1.0),
        history_force: random_tensor(rng, b * tau, 6, 1.0),
        latest_force: random_tensor(rng, b * tau, 6, 1.0),
        actions: random_tensor(rng, b * cfg.fast.horizon, 7, 1.0),
        labels: (0..b).map(|_| rng.gen_range(0.0..0.9)).collect(),
    }
}

/// Zero-initialized projections would make several gradients exactly zero,
/// which says nothing about their correctness.
pub fn perturb_zero_params(ps: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let v = ps.value_mut(id);
        if v.data().iter().all(|&x| x == 0.0) {
            for x in v.data_mut() {
                *x = 0.3 * rng.gen_range(-1.0..1.0);
            }
        }
    }
}

/// Prefix cache and latest-force tokens for every group of `batch`.
pub fn encode(
    model: &favla::model::FavlaModel,
    ps: &ParamStore,
    batch: &Batch,
) -> (favla::slow_context::PrefixCache, Tensor) {
    let b = batch.len();
    let (zf, _) = model.tcn.forward(ps, &batch.history_force, b).unwrap();
    let (prefix, _) = model.slow.build_prefix(ps, &batch.vision, &batch.tasks, &zf).unwrap();
    let (_, cache, _) = model.slow.encode_prefix(ps, &prefix, b, 0).unwrap();
    let (zl, _) = model.tcn.forward(ps, &batch.latest_force, b).unwrap();
    (cache, zl)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
