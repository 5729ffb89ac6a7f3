//! Demonstration datasets, the joint objective and the optimizer loop.

mod data;
mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::dataset::Dataset;
use crate::model::{Batch, FavlaModel, LossDraw, LossParts, ModelConfig, Policy};
use crate::numerics::ParamStore;

pub use data::{
    check_label_alignment, generate_dataset, history_stream, latest_window_rows, predict_labels,
    variance_mae, DatasetSummary, LabelingConfig, Sampler,
};
pub use optim::{adam_step, clip_grad_norm, cosine_lr, AdamHyper, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Gaussian jitter std on normalized vision features.
    pub vision_std: f64,
    /// Gaussian jitter std on normalized force windows.
    pub force_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            vision_std: 0.02,
            force_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the variance loss.
    pub lambda: f64,
    pub lr: f64,
    pub lr_final: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub adam: AdamHyper,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Iterations between intermediate checkpoints; 0 disables.
    pub checkpoint_every: usize,
    /// Trailing fraction of episodes kept out of training.
    pub holdout_fraction: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lr: 3e-4,
            lr_final: 3e-5,
            warmup: 100,
            batch_size: 16,
            iterations: 5000,
            adam: AdamHyper::default(),
            grad_clip: 1.0,
            checkpoint_every: 1000,
            holdout_fraction: 0.1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("training.lambda must be >= 0".into()));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("training iterations and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_final >= 0.0) {
            return Err(Error::Config("training learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("training.holdout_fraction must lie in [0, 1)".into()));
        }
        if !(self.augment.vision_std >= 0.0 && self.augment.force_std >= 0.0) {
            return Err(Error::Config("augmentation std must be >= 0".into()));
        }
        Ok(())
    }
}

/// `L_action + lambda * L_var` with both components.
pub fn total_loss(
    model: &FavlaModel,
    ps: &mut ParamStore,
    batch: &Batch,
    draw: &LossDraw,
    lambda: f64,
    with_grad: bool,
) -> Result<LossParts> {
    model.loss(ps, batch, draw, lambda, with_grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: f64,
    pub train_episodes: usize,
    pub holdout_episodes: usize,
    /// Mean |nu_hat - label| over held-out frames (eval mode).
    pub holdout_variance_mae: Option<f64>,
    pub checkpoint: String,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Split point between training and held-out episodes.
pub fn holdout_split(episodes: usize, fraction: f64) -> usize {
    let held = ((episodes as f64) * fraction).round() as usize;
    if episodes > 1 {
        episodes - held.min(episodes - 1)
    } else {
        episodes
    }
}

/// Trains from scratch; writes `model.json`/`model.bin`, `metrics.csv`,
/// periodic checkpoints and `summary.json` under `out`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    executed_steps: usize,
    dataset: &Dataset,
    seed: u64,
    out: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check_label_alignment(dataset, &mut rng)?;
    let norm = dataset.manifest.norm.clone();
    let mut policy = Policy::new(model_cfg.clone(), norm, &mut rng)?;
    policy.label = Some(dataset.manifest.label.clone());
    let split = holdout_split(dataset.episodes.len(), cfg.holdout_fraction);
    let train_eps: Vec<usize> = (0..split).collect();
    let sampler = Sampler::new(dataset, &policy, train_eps, executed_steps)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    batch_rng.set_stream(1);
    let mut draw_rng = ChaCha8Rng::seed_from_u64(seed);
    draw_rng.set_stream(2);

    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = String::from("iter,loss_total,loss_action,loss_var,lr\n");
    let ckpt_dir = out.join("checkpoints");
    let mut adam = AdamState::new(&policy.params);
    let mut last_good = policy.params.clone();
    let mut final_loss = f64::NAN;
    for iter in 0..cfg.iterations {
        let lr = cosine_lr(iter, cfg.iterations, cfg.warmup, cfg.lr, cfg.lr_final);
        let batch = sampler.sample(cfg.batch_size, &cfg.augment, &mut batch_rng);
        let draw = LossDraw::sample(&policy.model, batch.len(), true, &mut draw_rng);
        policy.params.zero_grads();
        let parts = policy
            .model
            .loss(&mut policy.params, &batch, &draw, cfg.lambda, true);
        let parts = match parts {
            Ok(p) if p.total.is_finite() && policy.params.grad_norm().is_finite() => p,
            other => {
                let reason = match other {
                    Err(e) => e.to_string(),
                    Ok(p) => format!("loss {}", p.total),
                };
                metrics
                    .write_all(csv.as_bytes())
                    .map_err(|e| Error::io(&metrics_path, e))?;
                let good = Policy {
                    params: last_good,
                    ..policy
                };
                good.save(&out.join("last_good.json"))?;
                return Err(Error::NonFinite(format!(
                    "training diverged at iteration {iter} ({reason}); last good checkpoint saved"
                )));
            }
        };
        clip_grad_norm(&mut policy.params, cfg.grad_clip);
        adam_step(&mut policy.params, &mut adam, &cfg.adam, lr);
        final_loss = parts.total;
        csv.push_str(&format!(
            "{iter},{},{},{},{}\n",
            parts.total, parts.action, parts.var, lr
        ));
        if csv.len() > 1 << 16 {
            metrics
                .write_all(csv.as_bytes())
                .map_err(|e| Error::io(&metrics_path, e))?;
            csv.clear();
        }
        let done = iter + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            policy.save(&ckpt_dir.join(format!("iter_{done:06}.json")))?;
            last_good = policy.params.clone();
        }
    }
    metrics
        .write_all(csv.as_bytes())
        .map_err(|e| Error::io(&metrics_path, e))?;
    let model_path = out.join(MODEL_FILE);
    policy.save(&model_path)?;
    let holdout: Vec<usize> = (split..dataset.episodes.len()).collect();
    let mae = variance_mae(dataset, &policy, &holdout)?;
    let summary = TrainSummary {
        iterations: cfg.iterations,
        final_loss,
        train_episodes: split,
        holdout_episodes: holdout.len(),
        holdout_variance_mae: mae,
        checkpoint: MODEL_FILE.into(),
    };
    let path = out.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Path of the final checkpoint written by [`train`].
pub fn model_path(out: &Path) -> PathBuf {
    out.join(MODEL_FILE)
}
