//! Slow prefix encoder: vision, instruction, history-force and a learned
//! variance-query token pass through a bidirectional pre-norm transformer.
//! Every layer's keys and values are published as a [`PrefixCache`] for the
//! fast expert; the variance-query position feeds the variance head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::force_features::{ForceWindow, TcnConfig};
use crate::numerics::blocks::{ResidualMlp, ResidualMlpCtx};
use crate::numerics::ops::{sigmoid, AttentionCtx, LayerNormCtx};
use crate::numerics::{
    attention_backward, attention_forward, Activation, Init, LayerNorm, Linear, ParamId,
    ParamStore, Tensor,
};

pub const STATE_DIM: usize = 7;
/// Upper clamp of the predicted variance.
pub const VARIANCE_MAX: f64 = 1.0 - 1e-6;

/// Attention flavour. Only standard multi-head attention is implemented; the
/// field records the substitution for grouped-query attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    MultiHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlowModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub attention: AttentionKind,
    pub cameras: usize,
    pub vision_dim: usize,
    pub vision_tokens: usize,
    pub tasks: usize,
    pub variance_hidden: [usize; 2],
    pub variance_dropout: f64,
    pub tcn: TcnConfig,
}

impl Default for SlowModelConfig {
    fn default() -> Self {
        SlowModelConfig {
            layers: 4,
            width: 128,
            heads: 8,
            mlp_hidden: 256,
            attention: AttentionKind::MultiHead,
            cameras: 2,
            vision_dim: 16,
            vision_tokens: 4,
            tasks: 2,
            variance_hidden: [64, 32],
            variance_dropout: 0.1,
            tcn: TcnConfig::default(),
        }
    }
}

impl SlowModelConfig {
    pub fn prefix_len(&self) -> usize {
        self.cameras * self.vision_tokens + 1 + self.tcn.tokens + 1
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Row of the variance-query token inside the prefix.
    pub fn variance_query_pos(&self) -> usize {
        self.prefix_len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.width,
            self.heads,
            self.mlp_hidden,
            self.cameras,
            self.vision_dim,
            self.vision_tokens,
            self.tasks,
            self.variance_hidden[0],
            self.variance_hidden[1],
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("slow_model dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "slow_model: {} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.variance_dropout) {
            return Err(Error::Config("variance_dropout must be in [0, 1)".into()));
        }
        if self.tcn.window < self.tcn.tokens || self.tcn.tokens == 0 {
            return Err(Error::Config("force window shorter than token count".into()));
        }
        Ok(())
    }
}

/// Multi-rate sensor snapshot at a decision instant.
#[derive(Clone, Debug)]
pub struct ObservationBundle {
    /// One feature vector per camera.
    pub vision: Vec<Vec<f64>>,
    /// Task / instruction id.
    pub instruction: usize,
    /// TCP pose `(x, y, z, roll, pitch, yaw)` and gripper width.
    pub state: [f64; STATE_DIM],
    pub history_force: ForceWindow,
    pub latest_force: ForceWindow,
    pub slow_tick: u64,
    pub fast_tick: u64,
}

/// Per-layer prefix keys and values, `[batch * s_pre, heads * head_dim]`
/// each (i.e. `S_pre x heads x d_h` per group, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCache {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub version: u64,
    pub s_pre: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub batch: usize,
}

impl PrefixCache {
    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn key(&self, layer: usize, pos: usize, head: usize) -> &[f64] {
        let row = self.keys[layer].row(pos);
        &row[head * self.head_dim..(head + 1) * self.head_dim]
    }

    pub fn value(&self, layer: usize, pos: usize, head: usize) -> &[f64] {
        let row = self.values[layer].row(pos);
        &row[head * self.head_dim..(head + 1) * self.head_dim]
    }

    /// Same tensors with every value zeroed.
    pub fn with_zero_values(&self) -> PrefixCache {
        let mut c = self.clone();
        for v in &mut c.values {
            v.fill(0.0);
        }
        c
    }
}

/// Result of one slow pass.
#[derive(Clone, Debug)]
pub struct SlowOutput {
    /// Final hidden states `H_VLF`, `[s_pre, width]`.
    pub hidden: Tensor,
    /// Immutable snapshot shared with fast-expert readers.
    pub cache: Arc<PrefixCache>,
    pub nu_hat: f64,
}

#[derive(Clone, Debug)]
struct SlowLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    mlp: ResidualMlp,
}

#[derive(Clone, Debug)]
struct SlowLayerCtx {
    ln1: LayerNormCtx,
    normed: Tensor,
    attn: AttentionCtx,
    mixed: Tensor,
    mlp: ResidualMlpCtx,
}

/// Prefix assembly and the slow transformer stack.
#[derive(Clone, Debug)]
pub struct SlowEncoder {
    pub cfg: SlowModelConfig,
    vision_proj: Vec<Linear>,
    task_embed: ParamId,
    force_proj: Linear,
    variance_query: ParamId,
    pos: ParamId,
    layers: Vec<SlowLayer>,
    ln_final: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct PrefixCtx {
    vision_in: Vec<Tensor>,
    force_tokens: Tensor,
    tasks: Vec<usize>,
    batch: usize,
}

#[derive(Clone, Debug)]
pub struct SlowCtx {
    layers: Vec<SlowLayerCtx>,
    ln_final: LayerNormCtx,
    batch: usize,
}

impl SlowEncoder {
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: SlowModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let vision_proj = (0..cfg.cameras)
            .map(|c| {
                Linear::new(
                    ps,
                    &format!("slow.vision{c}"),
                    cfg.vision_dim,
                    cfg.vision_tokens * d,
                    Init::FanIn,
                    true,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let task_embed = ps.add_init("slow.task_embed", &[cfg.tasks, d], Init::Normal(1.0), rng)?;
        let force_proj = Linear::new(
            ps,
            "slow.force_proj",
            cfg.tcn.width,
            d,
            Init::FanIn,
            true,
            rng,
        )?;
        let variance_query = ps.add_init("slow.variance_query", &[1, d], Init::Normal(1.0), rng)?;
        let pos = ps.add_init("slow.pos", &[cfg.prefix_len(), d], Init::Normal(0.1), rng)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("slow.layer{l}");
            layers.push(SlowLayer {
                ln1: LayerNorm::new(ps, &format!("{p}.ln1"), d, rng)?,
                q: Linear::new(ps, &format!("{p}.q"), d, d, Init::FanIn, false, rng)?,
                k: Linear::new(ps, &format!("{p}.k"), d, d, Init::FanIn, false, rng)?,
                v: Linear::new(ps, &format!("{p}.v"), d, d, Init::FanIn, false, rng)?,
                o: Linear::new(ps, &format!("{p}.o"), d, d, Init::FanIn, true, rng)?,
                mlp: ResidualMlp::new(ps, &format!("{p}.mlp"), d, cfg.mlp_hidden, rng)?,
            });
        }
        let ln_final = LayerNorm::new(ps, "slow.ln_final", d, rng)?;
        Ok(SlowEncoder {
            cfg,
            vision_proj,
            task_embed,
            force_proj,
            variance_query,
            pos,
            layers,
            ln_final,
        })
    }

    /// Assembles `[batch * s_pre, width]` prefix tokens from normalized
    /// vision features `[batch * cameras, vision_dim]`, task ids, and
    /// history force tokens `[batch * n_f, tcn_width]`.
    pub fn build_prefix(
        &self,
        ps: &ParamStore,
        vision: &Tensor,
        tasks: &[usize],
        force_tokens: &Tensor,
    ) -> Result<(Tensor, PrefixCtx)> {
        let cfg = &self.cfg;
        let batch = tasks.len();
        let (d, s, v_tok, nf) = (cfg.width, cfg.prefix_len(), cfg.vision_tokens, cfg.tcn.tokens);
        if vision.rows() != batch * cfg.cameras {
            return Err(Error::shape(
                "slow.vision",
                format!("[{}, {}]", batch * cfg.cameras, cfg.vision_dim),
                format!("{:?}", vision.shape()),
            ));
        }
        if force_tokens.rows() != batch * nf {
            return Err(Error::shape(
                "slow.force_proj",
                format!("[{}, {}]", batch * nf, cfg.tcn.width),
                format!("{:?}", force_tokens.shape()),
            ));
        }
        if let Some(&bad) = tasks.iter().find(|&&t| t >= cfg.tasks) {
            return Err(Error::Invalid(format!("unknown instruction id {bad}")));
        }
        let pos = ps.value(self.pos);
        let mut out = Tensor::zeros(&[batch * s, d]);
        for b in 0..batch {
            for r in 0..s {
                out.row_mut(b * s + r).copy_from_slice(pos.row(r));
            }
        }
        let mut vision_in = Vec::with_capacity(cfg.cameras);
        for (c, proj) in self.vision_proj.iter().enumerate() {
            let rows: Vec<usize> = (0..batch).map(|b| b * cfg.cameras + c).collect();
            let x = crate::numerics::ops::gather_rows(vision, &rows);
            let y = proj.forward(ps, &x)?;
            for b in 0..batch {
                let yrow = y.row(b);
                for i in 0..v_tok {
                    let dst = out.row_mut(b * s + c * v_tok + i);
                    for (o, v) in dst.iter_mut().zip(&yrow[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
            }
            vision_in.push(x);
        }
        let emb = ps.value(self.task_embed);
        let fp = self.force_proj.forward(ps, force_tokens)?;
        let vq = ps.value(self.variance_query);
        let instr_pos = cfg.cameras * v_tok;
        for (b, &t) in tasks.iter().enumerate() {
            add_row(out.row_mut(b * s + instr_pos), emb.row(t));
            for i in 0..nf {
                add_row(out.row_mut(b * s + instr_pos + 1 + i), fp.row(b * nf + i));
            }
            add_row(out.row_mut(b * s + s - 1), vq.row(0));
        }
        Ok((
            out,
            PrefixCtx {
                vision_in,
                force_tokens: force_tokens.clone(),
                tasks: tasks.to_vec(),
                batch,
            },
        ))
    }

    /// Returns the gradient w.r.t. the history force tokens.
    pub fn build_prefix_backward(
        &self,
        ps: &mut ParamStore,
        ctx: &PrefixCtx,
        d_prefix: &Tensor,
    ) -> Tensor {
        let cfg = &self.cfg;
        let (d, s, v_tok, nf) = (cfg.width, cfg.prefix_len(), cfg.vision_tokens, cfg.tcn.tokens);
        let batch = ctx.batch;
        {
            let g = ps.grad_mut(self.pos);
            for b in 0..batch {
                for r in 0..s {
                    add_row(g.row_mut(r), d_prefix.row(b * s + r));
                }
            }
        }
        for (c, proj) in self.vision_proj.iter().enumerate() {
            let mut dy = Tensor::zeros(&[batch, v_tok * d]);
            for b in 0..batch {
                let row = dy.row_mut(b);
                for i in 0..v_tok {
                    row[i * d..(i + 1) * d].copy_from_slice(d_prefix.row(b * s + c * v_tok + i));
                }
            }
            proj.backward(ps, &ctx.vision_in[c], &dy);
        }
        let instr_pos = cfg.cameras * v_tok;
        let mut d_fp = Tensor::zeros(&[batch * nf, d]);
        for (b, &t) in ctx.tasks.iter().enumerate() {
            add_row(ps.grad_mut(self.task_embed).row_mut(t), d_prefix.row(b * s + instr_pos));
            for i in 0..nf {
                d_fp.row_mut(b * nf + i)
                    .copy_from_slice(d_prefix.row(b * s + instr_pos + 1 + i));
            }
            add_row(ps.grad_mut(self.variance_query).row_mut(0), d_prefix.row(b * s + s - 1));
        }
        self.force_proj.backward(ps, &ctx.force_tokens, &d_fp)
    }

    /// Runs the transformer stack over assembled prefixes; returns
    /// `H_VLF` and the per-layer cache.
    pub fn encode_prefix(
        &self,
        ps: &ParamStore,
        prefix: &Tensor,
        batch: usize,
        version: u64,
    ) -> Result<(Tensor, PrefixCache, SlowCtx)> {
        let cfg = &self.cfg;
        let mut x = prefix.clone();
        let mut keys = Vec::with_capacity(cfg.layers);
        let mut values = Vec::with_capacity(cfg.layers);
        let mut ctxs = Vec::with_capacity(cfg.layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let (normed, ln1) = layer.ln1.forward(ps, &x)?;
            let q = layer.q.forward(ps, &normed)?;
            let k = layer.k.forward(ps, &normed)?;
            let v = layer.v.forward(ps, &normed)?;
            let (mixed, attn) = attention_forward(&q, &k, &v, cfg.heads, batch)?;
            let mut h = layer.o.forward(ps, &mixed)?;
            h.add_assign(&x);
            let (y, mlp) = layer.mlp.forward(ps, &h)?;
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("slow layer {l}")));
            }
            keys.push(k);
            values.push(v);
            ctxs.push(SlowLayerCtx {
                ln1,
                normed,
                attn,
                mixed,
                mlp,
            });
            x = y;
        }
        let (hidden, ln_final) = self.ln_final.forward(ps, &x)?;
        let cache = PrefixCache {
            keys,
            values,
            version,
            s_pre: cfg.prefix_len(),
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            batch,
        };
        Ok((
            hidden,
            cache,
            SlowCtx {
                layers: ctxs,
                ln_final,
                batch,
            },
        ))
    }

    /// Backward through the stack. `d_cache[l]` holds the gradients w.r.t.
    /// layer `l`'s cached keys and values. Returns the gradient w.r.t. the
    /// prefix tokens.
    pub fn encode_prefix_backward(
        &self,
        ps: &mut ParamStore,
        ctx: &SlowCtx,
        d_hidden: &Tensor,
        d_cache: &[(Tensor, Tensor)],
    ) -> Tensor {
        let mut dx = self.ln_final.backward(ps, &ctx.ln_final, d_hidden);
        for (l, (layer, c)) in self.layers.iter().zip(&ctx.layers).enumerate().rev() {
            let dh = layer.mlp.backward(ps, &c.mlp, &dx);
            let d_mixed = layer.o.backward(ps, &c.mixed, &dh);
            let (dq, mut dk, mut dv) = attention_backward(&c.attn, &d_mixed);
            if let Some((ek, ev)) = d_cache.get(l) {
                dk.add_assign(ek);
                dv.add_assign(ev);
            }
            let mut dn = layer.q.backward(ps, &c.normed, &dq);
            dn.add_assign(&layer.k.backward(ps, &c.normed, &dk));
            dn.add_assign(&layer.v.backward(ps, &c.normed, &dv));
            let mut d_in = layer.ln1.backward(ps, &c.ln1, &dn);
            d_in.add_assign(&dh);
            dx = d_in;
        }
        let _ = ctx.batch;
        dx
    }
}

fn add_row(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// MLP over the variance-query token's final hidden state, squashed by a
/// sigmoid and clamped to `[0, VARIANCE_MAX]`.
#[derive(Clone, Debug)]
pub struct VarianceHead {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    pub dropout: f64,
}

/// Inverted-dropout keep masks for the two hidden layers.
#[derive(Clone, Debug)]
pub struct DropoutMasks {
    pub hidden1: Vec<f64>,
    pub hidden2: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VarianceHeadCtx {
    input: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    act2: Tensor,
    masks: Option<DropoutMasks>,
    out: Vec<f64>,
    clamped: Vec<bool>,
}

impl VarianceHead {
    pub fn new<R: Rng>(ps: &mut ParamStore, cfg: &SlowModelConfig, rng: &mut R) -> Result<Self> {
        let [h1, h2] = cfg.variance_hidden;
        Ok(VarianceHead {
            fc1: Linear::new(ps, "slow.var_head.fc1", cfg.width, h1, Init::FanIn, true, rng)?,
            fc2: Linear::new(ps, "slow.var_head.fc2", h1, h2, Init::FanIn, true, rng)?,
            fc3: Linear::new(ps, "slow.var_head.fc3", h2, 1, Init::FanIn, true, rng)?,
            dropout: cfg.variance_dropout,
        })
    }

    pub fn hidden_sizes(&self) -> (usize, usize) {
        (self.fc1.out_dim, self.fc2.out_dim)
    }

    /// Draws train-time keep masks for `batch` rows.
    pub fn sample_masks<R: Rng>(&self, batch: usize, rng: &mut R) -> DropoutMasks {
        let keep = 1.0 - self.dropout;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let (h1, h2) = self.hidden_sizes();
        let hidden1 = draw(batch * h1);
        let hidden2 = draw(batch * h2);
        DropoutMasks { hidden1, hidden2 }
    }

    /// `tokens`: `[batch, width]` variance-query states.
    pub fn forward(
        &self,
        ps: &ParamStore,
        tokens: &Tensor,
        masks: Option<&DropoutMasks>,
    ) -> Result<(Vec<f64>, VarianceHeadCtx)> {
        use crate::numerics::ops::apply_mask;
        let pre1 = self.fc1.forward(ps, tokens)?;
        let mut act1 = Activation::Gelu.forward(&pre1);
        if let Some(m) = masks {
            act1 = apply_mask(&act1, &m.hidden1);
        }
        let pre2 = self.fc2.forward(ps, &act1)?;
        let mut act2 = Activation::Gelu.forward(&pre2);
        if let Some(m) = masks {
            act2 = apply_mask(&act2, &m.hidden2);
        }
        let logits = self.fc3.forward(ps, &act2)?;
        let mut out = Vec::with_capacity(logits.len());
        let mut clamped = Vec::with_capacity(logits.len());
        for &z in logits.data() {
            if !z.is_finite() {
                return Err(Error::NonFinite("variance head".into()));
            }
            let s = sigmoid(z);
            clamped.push(s > VARIANCE_MAX);
            out.push(s.clamp(0.0, VARIANCE_MAX));
        }
        Ok((
            out.clone(),
            VarianceHeadCtx {
                input: tokens.clone(),
                pre1,
                act1,
                pre2,
                act2,
                masks: masks.cloned(),
                out,
                clamped,
            },
        ))
    }

    /// `d_out`: gradient w.r.t. each predicted value. Returns the gradient
    /// w.r.t. the input tokens.
    pub fn backward(&self, ps: &mut ParamStore, ctx: &VarianceHeadCtx, d_out: &[f64]) -> Tensor {
        use crate::numerics::ops::apply_mask;
        let dz: Vec<f64> = d_out
            .iter()
            .zip(&ctx.out)
            .zip(&ctx.clamped)
            .map(|((g, &s), &c)| if c { 0.0 } else { g * s * (1.0 - s) })
            .collect();
        let dz = Tensor::matrix(dz.len(), 1, dz);
        let mut d_act2 = self.fc3.backward(ps, &ctx.act2, &dz);
        if let Some(m) = &ctx.masks {
            d_act2 = apply_mask(&d_act2, &m.hidden2);
        }
        let d_pre2 = Activation::Gelu.backward(&ctx.pre2, &d_act2);
        let mut d_act1 = self.fc2.backward(ps, &ctx.act1, &d_pre2);
        if let Some(m) = &ctx.masks {
            d_act1 = apply_mask(&d_act1, &m.hidden1);
        }
        let d_pre1 = Activation::Gelu.backward(&ctx.pre1, &d_act1);
        self.fc1.backward(ps, &ctx.input, &d_pre1)
    }

    pub fn zero_weights(&self, ps: &mut ParamStore) {
        for lin in [&self.fc1, &self.fc2, &self.fc3] {
            ps.value_mut(lin.w).fill(0.0);
            if let Some(b) = lin.b {
                ps.value_mut(b).fill(0.0);
            }
        }
    }
}

/// Rows of the variance-query token for every group in `hidden`.
pub fn variance_query_rows(cfg: &SlowModelConfig, batch: usize) -> Vec<usize> {
    let s = cfg.prefix_len();
    (0..batch).map(|b| b * s + s - 1).collect()
}
