//! The composed policy: shared force tokenizer, slow prefix encoder with
//! variance head, and the fast flow-matching expert.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fast_expert::{ActionChunk, ExpertInput, FastExpert, FastModelConfig, ACTION_DIM};
use crate::force_features::{ForceWindow, TcnEncoder, VarianceLabelConfig, FORCE_AXES};
use crate::numerics::ops::{gather_rows, scatter_add_rows};
use crate::numerics::{load_checkpoint, save_checkpoint, ParamStore, Tensor};
use crate::slow_context::{
    variance_query_rows, DropoutMasks, ObservationBundle, PrefixCache, SlowEncoder,
    SlowModelConfig, SlowOutput, VarianceHead, STATE_DIM,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub slow: SlowModelConfig,
    pub fast: FastModelConfig,
}

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and std over rows; near-constant dimensions keep std 1.
    pub fn fit<'a, I>(dim: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        // Welford updates: constant dimensions give exactly zero variance.
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for r in rows {
            n += 1;
            for i in 0..dim {
                let d = r[i] - mean[i];
                mean[i] += d / n as f64;
                m2[i] += d * (r[i] - mean[i]);
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let std = m2
            .iter()
            .map(|&m| {
                let s = (m / n as f64).max(0.0).sqrt();
                if s < 1e-9 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.dim() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn invert(&self, z: &[f64], out: &mut [f64]) {
        for i in 0..self.dim() {
            out[i] = z[i] * self.std[i] + self.mean[i];
        }
    }
}

/// Input/target normalization fitted on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    /// Shared by all cameras.
    pub vision: Standardizer,
    pub state: Standardizer,
    pub force: Standardizer,
    pub action: Standardizer,
}

impl NormStats {
    pub fn identity(vision_dim: usize) -> Self {
        NormStats {
            vision: Standardizer::identity(vision_dim),
            state: Standardizer::identity(STATE_DIM),
            force: Standardizer::identity(FORCE_AXES),
            action: Standardizer::identity(ACTION_DIM),
        }
    }
}

/// A normalized training batch of `B` samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B * cameras, vision_dim]`.
    pub vision: Tensor,
    pub tasks: Vec<usize>,
    /// `[B, 7]`.
    pub state: Tensor,
    /// `[B * tau, 6]`.
    pub history_force: Tensor,
    /// `[B * tau, 6]`.
    pub latest_force: Tensor,
    /// Target chunks `[B * H, 7]`.
    pub actions: Tensor,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Randomness consumed by one loss evaluation, drawn up front so the loss
/// is a deterministic function of parameters (needed for gradient checks).
#[derive(Clone, Debug)]
pub struct LossDraw {
    pub u: Vec<f64>,
    /// `[B * H, 7]` standard normal.
    pub noise: Tensor,
    pub masks: Option<DropoutMasks>,
}

impl LossDraw {
    pub fn sample<R: Rng>(model: &FavlaModel, batch: usize, train: bool, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let h = model.fast.cfg.horizon;
        let u = (0..batch).map(|_| rng.gen::<f64>()).collect();
        let noise = (0..batch * h * ACTION_DIM)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let masks = train.then(|| model.var_head.sample_masks(batch, rng));
        LossDraw {
            u,
            noise: Tensor::matrix(batch * h, ACTION_DIM, noise),
            masks,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub action: f64,
    pub var: f64,
}

#[derive(Clone, Debug)]
pub struct FavlaModel {
    pub cfg: ModelConfig,
    pub tcn: TcnEncoder,
    pub slow: SlowEncoder,
    pub var_head: VarianceHead,
    pub fast: FastExpert,
}

impl FavlaModel {
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.slow.validate()?;
        cfg.fast.validate()?;
        let tcn = TcnEncoder::new(ps, "tcn", cfg.slow.tcn.clone(), rng)?;
        let slow = SlowEncoder::new(ps, cfg.slow.clone(), rng)?;
        let var_head = VarianceHead::new(ps, &cfg.slow, rng)?;
        let fast = FastExpert::new(
            ps,
            cfg.fast.clone(),
            cfg.slow.heads,
            cfg.slow.head_dim(),
            cfg.slow.tcn.width,
            rng,
        )?;
        Ok(FavlaModel {
            cfg,
            tcn,
            slow,
            var_head,
            fast,
        })
    }

    pub fn horizon(&self) -> usize {
        self.fast.cfg.horizon
    }

    /// Total loss; accumulates gradients when `with_grad` is set.
    pub fn loss(
        &self,
        ps: &mut ParamStore,
        batch: &Batch,
        draw: &LossDraw,
        lambda: f64,
        with_grad: bool,
    ) -> Result<LossParts> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let h = self.horizon();
        let (zf, hist_ctx) = self.tcn.forward(ps, &batch.history_force, b)?;
        let (zl, latest_ctx) = self.tcn.forward(ps, &batch.latest_force, b)?;
        let (prefix, pctx) = self.slow.build_prefix(ps, &batch.vision, &batch.tasks, &zf)?;
        let (hidden, cache, sctx) = self.slow.encode_prefix(ps, &prefix, b, 0)?;
        let vq_rows = variance_query_rows(&self.cfg.slow, b);
        let vq = gather_rows(&hidden, &vq_rows);
        let (nu, hctx) = self.var_head.forward(ps, &vq, draw.masks.as_ref())?;

        let n = b * h * ACTION_DIM;
        let mut x = Tensor::zeros(&[b * h, ACTION_DIM]);
        let mut target = Tensor::zeros(&[b * h, ACTION_DIM]);
        for g in 0..b {
            let u = draw.u[g];
            for r in g * h..(g + 1) * h {
                for c in 0..ACTION_DIM {
                    let a = batch.actions.row(r)[c];
                    let e = draw.noise.row(r)[c];
                    x.row_mut(r)[c] = u * a + (1.0 - u) * e;
                    target.row_mut(r)[c] = a - e;
                }
            }
        }
        let input = ExpertInput {
            x: &x,
            u: &draw.u,
            state: &batch.state,
            cache: &cache,
            force_tokens: &zl,
        };
        let (vel, ectx) = self.fast.vector_field(ps, &input)?;
        let mut resid = vel;
        for (r, t) in resid.data_mut().iter_mut().zip(target.data()) {
            *r -= t;
        }
        let action = resid.data().iter().map(|r| r * r).sum::<f64>() / n as f64;
        let var = nu
            .iter()
            .zip(&batch.labels)
            .map(|(p, l)| (p - l) * (p - l))
            .sum::<f64>()
            / b as f64;
        let parts = LossParts {
            total: action + lambda * var,
            action,
            var,
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if !with_grad {
            return Ok(parts);
        }

        resid.scale(2.0 / n as f64);
        let eg = self
            .fast
            .vector_field_backward(ps, &ectx, &resid, self.cfg.slow.prefix_len());
        self.tcn.backward(ps, &latest_ctx, &eg.force_tokens);
        let d_nu: Vec<f64> = nu
            .iter()
            .zip(&batch.labels)
            .map(|(p, l)| lambda * 2.0 * (p - l) / b as f64)
            .collect();
        let d_vq = self.var_head.backward(ps, &hctx, &d_nu);
        let mut d_hidden = Tensor::zeros(hidden.shape());
        scatter_add_rows(&mut d_hidden, &vq_rows, &d_vq);
        let d_prefix = self
            .slow
            .encode_prefix_backward(ps, &sctx, &d_hidden, &eg.cache);
        let d_zf = self.slow.build_prefix_backward(ps, &pctx, &d_prefix);
        self.tcn.backward(ps, &hist_ctx, &d_zf);
        Ok(parts)
    }
}

/// Trained model plus its normalization, ready for closed-loop use.
#[derive(Clone, Debug)]
pub struct Policy {
    pub model: FavlaModel,
    pub params: ParamStore,
    pub norm: NormStats,
    /// Label settings of the training data, kept for trace rendering.
    pub label: Option<VarianceLabelConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyMeta {
    model: ModelConfig,
    norm: NormStats,
    #[serde(default)]
    label: Option<VarianceLabelConfig>,
}

impl Policy {
    pub fn new<R: Rng>(cfg: ModelConfig, norm: NormStats, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let model = FavlaModel::new(&mut params, cfg, rng)?;
        Ok(Policy {
            model,
            params,
            norm,
            label: None,
        })
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let meta = serde_json::to_value(PolicyMeta {
            model: self.model.cfg.clone(),
            norm: self.norm.clone(),
            label: self.label.clone(),
        })?;
        save_checkpoint(&self.params, manifest_path, meta)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = crate::numerics::read_manifest(manifest_path)?;
        let meta: PolicyMeta = serde_json::from_value(manifest.meta)
            .map_err(|e| Error::format(manifest_path, format!("checkpoint metadata: {e}")))?;
        // Parameters are overwritten below, the seed is irrelevant.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut policy = Policy::new(meta.model, meta.norm, &mut rng)?;
        policy.label = meta.label;
        load_checkpoint(&mut policy.params, manifest_path)?;
        Ok(policy)
    }

    fn force_tensor(&self, window: &ForceWindow) -> Tensor {
        let mut data = vec![0.0; window.len() * FORCE_AXES];
        for (i, r) in window.rows().enumerate() {
            self.norm
                .force
                .apply(r, &mut data[i * FORCE_AXES..(i + 1) * FORCE_AXES]);
        }
        Tensor::matrix(window.len(), FORCE_AXES, data)
    }

    /// Latest-force tokens `z'_f` for one window.
    pub fn encode_force(&self, window: &ForceWindow) -> Result<Tensor> {
        let x = self.force_tensor(window);
        Ok(self.model.tcn.forward(&self.params, &x, 1)?.0)
    }

    pub fn normalized_state(&self, state: &[f64; STATE_DIM]) -> Tensor {
        let mut s = vec![0.0; STATE_DIM];
        self.norm.state.apply(state, &mut s);
        Tensor::matrix(1, STATE_DIM, s)
    }

    /// One slow pass (eval mode) over an observation.
    pub fn slow_pass(&self, obs: &ObservationBundle, version: u64) -> Result<SlowOutput> {
        let cfg = &self.model.cfg.slow;
        if obs.vision.len() != cfg.cameras {
            return Err(Error::Invalid(format!(
                "expected {} camera features, got {}",
                cfg.cameras,
                obs.vision.len()
            )));
        }
        let mut vision = vec![0.0; cfg.cameras * cfg.vision_dim];
        for (c, v) in obs.vision.iter().enumerate() {
            if v.len() != cfg.vision_dim {
                return Err(Error::shape(
                    "slow.vision",
                    format!("{}", cfg.vision_dim),
                    format!("{}", v.len()),
                ));
            }
            self.norm
                .vision
                .apply(v, &mut vision[c * cfg.vision_dim..(c + 1) * cfg.vision_dim]);
        }
        let vision = Tensor::matrix(cfg.cameras, cfg.vision_dim, vision);
        let hist = self.force_tensor(&obs.history_force);
        let (zf, _) = self.model.tcn.forward(&self.params, &hist, 1)?;
        let (prefix, _) =
            self.model
                .slow
                .build_prefix(&self.params, &vision, &[obs.instruction], &zf)?;
        let (hidden, cache, _) = self
            .model
            .slow
            .encode_prefix(&self.params, &prefix, 1, version)?;
        let vq = gather_rows(&hidden, &variance_query_rows(cfg, 1));
        let (nu, _) = self.model.var_head.forward(&self.params, &vq, None)?;
        Ok(SlowOutput {
            hidden,
            cache: Arc::new(cache),
            nu_hat: nu[0],
        })
    }

    /// Integrates the flow from `noise` (model space, `[H, 7]`) and returns
    /// the denormalized chunk clamped to the action bounds.
    pub fn sample_chunk(
        &self,
        state: &Tensor,
        cache: &PrefixCache,
        force_tokens: &Tensor,
        noise: &Tensor,
        steps: usize,
        origin_tick: u64,
        noise_id: u64,
    ) -> Result<ActionChunk> {
        let flow =
            self.model
                .fast
                .integrate(&self.params, state, cache, force_tokens, noise, steps)?;
        let bounds = &self.model.cfg.fast.action_bounds;
        let actions = (0..flow.x.rows())
            .map(|r| {
                let mut a = [0.0; ACTION_DIM];
                self.norm.action.invert(flow.x.row(r), &mut a);
                bounds.clamp(&mut a);
                a
            })
            .collect();
        Ok(ActionChunk {
            actions,
            origin_tick,
            noise_id,
        })
    }
}
