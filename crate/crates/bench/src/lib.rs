//! Shared fixtures for the kernel benchmarks.

use favla::model::{NormStats, Policy, ModelConfig};
use favla::numerics::Tensor;
use favla::simsuite::{Env, TaskKind, TaskSpec};
use favla::slow_context::ObservationBundle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Untrained default-size policy with identity normalization.
pub fn default_policy(seed: u64) -> Policy {
    let cfg = ModelConfig::default();
    let norm = NormStats::identity(cfg.slow.vision_dim);
    Policy::new(cfg, norm, &mut rng(seed)).expect("default config is valid")
}

/// Peg environment sized for `policy` and its first observation.
pub fn peg_observation(policy: &Policy, seed: u64) -> (Env, ObservationBundle) {
    let spec = TaskSpec::default_for(TaskKind::Peg);
    let mut env = Env::new(&spec, seed, policy.model.cfg.slow.tcn.window).expect("valid spec");
    let obs = env.observe();
    (env, obs)
}
