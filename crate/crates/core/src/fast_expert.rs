//! Fast action expert: a small transformer over `[state token, H noisy
//! action tokens]` that attends to the slow prefix cache and receives the
//! latest force tokens through a per-layer additive force adapter. Actions
//! are generated by Euler integration of the learned flow field.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::blocks::{concat_groups, split_groups, ResidualMlp, ResidualMlpCtx};
use crate::numerics::ops::{gather_rows, scatter_add_rows, AttentionCtx, LayerNormCtx};
use crate::numerics::{
    attention_backward, attention_forward, Init, LayerNorm, Linear, ParamId, ParamStore, Tensor,
};
use crate::slow_context::{PrefixCache, STATE_DIM};

pub const ACTION_DIM: usize = 7;

/// Per-dimension action limits in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBounds {
    pub low: [f64; ACTION_DIM],
    pub high: [f64; ACTION_DIM],
}

impl Default for ActionBounds {
    fn default() -> Self {
        ActionBounds {
            low: [-0.003, -0.003, -0.003, -0.03, -0.03, -0.03, 0.0],
            high: [0.003, 0.003, 0.003, 0.03, 0.03, 0.03, 0.05],
        }
    }
}

impl ActionBounds {
    pub fn clamp(&self, a: &mut [f64; ACTION_DIM]) {
        for (i, v) in a.iter_mut().enumerate() {
            *v = v.clamp(self.low[i], self.high[i]);
        }
    }

    pub fn contains(&self, a: &[f64; ACTION_DIM]) -> bool {
        a.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.low[i] && *v <= self.high[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FastModelConfig {
    pub layers: usize,
    pub width: usize,
    /// Heads of the force adapter. Self/cross attention shares the slow
    /// model's head layout so the prefix cache can be attended directly.
    pub heads: usize,
    pub adapter_width: usize,
    pub mlp_hidden: usize,
    pub horizon: usize,
    pub euler_steps: usize,
    pub time_features: usize,
    pub action_bounds: ActionBounds,
}

impl Default for FastModelConfig {
    fn default() -> Self {
        FastModelConfig {
            layers: 4,
            width: 64,
            heads: 4,
            adapter_width: 64,
            mlp_hidden: 128,
            horizon: 32,
            euler_steps: 10,
            time_features: 16,
            action_bounds: ActionBounds::default(),
        }
    }
}

impl FastModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.width,
            self.heads,
            self.adapter_width,
            self.mlp_hidden,
            self.horizon,
            self.euler_steps,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("fast_model dimensions must be positive".into()));
        }
        if self.adapter_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "fast_model: {} heads do not divide adapter width {}",
                self.heads, self.adapter_width
            )));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::Config("time_features must be a positive even number".into()));
        }
        let b = &self.action_bounds;
        if (0..ACTION_DIM).any(|i| !(b.low[i] <= b.high[i])) {
            return Err(Error::Config("action bounds: low must not exceed high".into()));
        }
        Ok(())
    }
}

/// `H` consecutive actions from one expert invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub actions: Vec<[f64; ACTION_DIM]>,
    /// Global action-step index of `actions[0]`.
    pub origin_tick: u64,
    pub noise_id: u64,
}

impl ActionChunk {
    pub fn covers(&self, tick: u64) -> bool {
        tick >= self.origin_tick && tick < self.origin_tick + self.actions.len() as u64
    }

    pub fn at(&self, tick: u64) -> Option<&[f64; ACTION_DIM]> {
        if self.covers(tick) {
            Some(&self.actions[(tick - self.origin_tick) as usize])
        } else {
            None
        }
    }
}

/// Integration state of the flow sampler.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub x: Tensor,
    pub u: f64,
    pub steps: usize,
}

/// Sinusoidal features of the flow time, `[batch, dim]`.
pub fn time_features(u: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(u.len() * dim);
    for &t in u {
        for i in 0..half {
            let freq = std::f64::consts::PI * 2f64.powi(i as i32) * 0.5;
            data.push((freq * t).sin());
        }
        for i in 0..half {
            let freq = std::f64::consts::PI * 2f64.powi(i as i32) * 0.5;
            data.push((freq * t).cos());
        }
    }
    Tensor::matrix(u.len(), dim, data)
}

/// Cross-attention from action tokens to latest-force tokens, added back
/// residually. The output projection starts at zero, so the adapter is an
/// exact identity before training.
#[derive(Clone, Debug)]
pub struct ForceAdapter {
    ln: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

#[derive(Clone, Debug)]
pub struct ForceAdapterCtx {
    ln: LayerNormCtx,
    normed: Tensor,
    attn: AttentionCtx,
    mixed: Tensor,
}

impl ForceAdapter {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        force_dim: usize,
        inner: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ForceAdapter {
            ln: LayerNorm::new(ps, &format!("{name}.ln"), width, rng)?,
            q: Linear::new(ps, &format!("{name}.q"), width, inner, Init::FanIn, false, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), force_dim, inner, Init::FanIn, false, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), force_dim, inner, Init::FanIn, false, rng)?,
            o: Linear::new(ps, &format!("{name}.o"), inner, width, Init::Zeros, true, rng)?,
            heads,
        })
    }

    /// Returns `z_a + Attn(Q_a, K_f, V_f)` for `z_a: [batch * H, width]` and
    /// `z_f: [batch * n_f, force_dim]`.
    pub fn forward(
        &self,
        ps: &ParamStore,
        z_a: &Tensor,
        z_f: &Tensor,
        batch: usize,
    ) -> Result<(Tensor, ForceAdapterCtx)> {
        let (mut out, ctx) = self.update(ps, z_a, z_f, batch)?;
        out.add_assign(z_a);
        Ok((out, ctx))
    }

    fn update(
        &self,
        ps: &ParamStore,
        z_a: &Tensor,
        z_f: &Tensor,
        batch: usize,
    ) -> Result<(Tensor, ForceAdapterCtx)> {
        let (normed, ln) = self.ln.forward(ps, z_a)?;
        let q = self.q.forward(ps, &normed)?;
        let k = self.k.forward(ps, z_f)?;
        let v = self.v.forward(ps, z_f)?;
        let (mixed, attn) = attention_forward(&q, &k, &v, self.heads, batch)?;
        let upd = self.o.forward(ps, &mixed)?;
        Ok((
            upd,
            ForceAdapterCtx {
                ln,
                normed,
                attn,
                mixed,
            },
        ))
    }

    /// Backward of the update only (the residual is handled by the caller).
    /// Returns `(d_z_a, d_z_f)`.
    fn update_backward(
        &self,
        ps: &mut ParamStore,
        ctx: &ForceAdapterCtx,
        z_f: &Tensor,
        d_upd: &Tensor,
    ) -> (Tensor, Tensor) {
        let d_mixed = self.o.backward(ps, &ctx.mixed, d_upd);
        let (dq, dk, dv) = attention_backward(&ctx.attn, &d_mixed);
        let d_normed = self.q.backward(ps, &ctx.normed, &dq);
        let mut d_zf = self.k.backward(ps, z_f, &dk);
        d_zf.add_assign(&self.v.backward(ps, z_f, &dv));
        (self.ln.backward(ps, &ctx.ln, &d_normed), d_zf)
    }

    pub fn output_projection(&self) -> &Linear {
        &self.o
    }
}

#[derive(Clone, Debug)]
struct ExpertLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    adapter: ForceAdapter,
    mlp: ResidualMlp,
}

#[derive(Clone, Debug)]
struct ExpertLayerCtx {
    ln1: LayerNormCtx,
    normed: Tensor,
    attn: AttentionCtx,
    mixed: Tensor,
    adapter: ForceAdapterCtx,
    mlp: ResidualMlpCtx,
}

/// Inputs of one batched vector-field evaluation (all model-space).
#[derive(Clone, Copy, Debug)]
pub struct ExpertInput<'a> {
    /// Noisy actions `[batch * H, 7]`.
    pub x: &'a Tensor,
    /// Flow time per group.
    pub u: &'a [f64],
    /// Normalized robot state `[batch, 7]`.
    pub state: &'a Tensor,
    pub cache: &'a PrefixCache,
    /// Latest force tokens `[batch * n_f, force_dim]`.
    pub force_tokens: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct ExpertCtx {
    x: Tensor,
    state: Tensor,
    time: Tensor,
    force_tokens: Tensor,
    layers: Vec<ExpertLayerCtx>,
    ln_out: LayerNormCtx,
    final_normed: Tensor,
    batch: usize,
}

/// Gradients flowing out of the expert into its conditioning.
#[derive(Clone, Debug)]
pub struct ExpertGrads {
    /// Per layer `(d_keys, d_values)` w.r.t. the prefix cache.
    pub cache: Vec<(Tensor, Tensor)>,
    pub force_tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct FastExpert {
    pub cfg: FastModelConfig,
    attn_heads: usize,
    state_proj: Linear,
    time_proj: Linear,
    action_in: Linear,
    action_pos: ParamId,
    layers: Vec<ExpertLayer>,
    ln_out: LayerNorm,
    head: Linear,
}

impl FastExpert {
    /// `attn_heads * head_dim` must match the prefix cache layout.
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        cfg: FastModelConfig,
        attn_heads: usize,
        head_dim: usize,
        force_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let inner = attn_heads * head_dim;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("fast.layer{l}");
            layers.push(ExpertLayer {
                ln1: LayerNorm::new(ps, &format!("{p}.ln1"), w, rng)?,
                q: Linear::new(ps, &format!("{p}.q"), w, inner, Init::FanIn, false, rng)?,
                k: Linear::new(ps, &format!("{p}.k"), w, inner, Init::FanIn, false, rng)?,
                v: Linear::new(ps, &format!("{p}.v"), w, inner, Init::FanIn, false, rng)?,
                o: Linear::new(ps, &format!("{p}.o"), inner, w, Init::FanIn, true, rng)?,
                adapter: ForceAdapter::new(
                    ps,
                    &format!("adapter.layer{l}"),
                    w,
                    force_dim,
                    cfg.adapter_width,
                    cfg.heads,
                    rng,
                )?,
                mlp: ResidualMlp::new(ps, &format!("{p}.mlp"), w, cfg.mlp_hidden, rng)?,
            });
        }
        Ok(FastExpert {
            attn_heads,
            state_proj: Linear::new(ps, "fast.state_proj", STATE_DIM, w, Init::FanIn, true, rng)?,
            time_proj: Linear::new(
                ps,
                "fast.time_proj",
                cfg.time_features,
                w,
                Init::FanIn,
                true,
                rng,
            )?,
            action_in: Linear::new(ps, "fast.action_in", ACTION_DIM, w, Init::FanIn, true, rng)?,
            action_pos: ps.add_init("fast.action_pos", &[cfg.horizon, w], Init::Normal(0.1), rng)?,
            layers,
            ln_out: LayerNorm::new(ps, "fast.ln_out", w, rng)?,
            head: Linear::new(ps, "fast.head", w, ACTION_DIM, Init::FanIn, true, rng)?,
            cfg,
        })
    }

    fn action_rows(&self, batch: usize) -> Vec<usize> {
        let t = self.cfg.horizon + 1;
        (0..batch)
            .flat_map(|b| (0..self.cfg.horizon).map(move |i| b * t + 1 + i))
            .collect()
    }

    /// Velocity `[batch * H, 7]` of the flow at `(x, u)`.
    pub fn vector_field(
        &self,
        ps: &ParamStore,
        input: &ExpertInput<'_>,
    ) -> Result<(Tensor, ExpertCtx)> {
        let cfg = &self.cfg;
        let batch = input.u.len();
        let (h, w) = (cfg.horizon, cfg.width);
        let t = h + 1;
        let cache = input.cache;
        if cache.layers() != cfg.layers || cache.batch != batch {
            return Err(Error::Invalid(format!(
                "prefix cache has {} layers x {} groups, expert needs {} x {}",
                cache.layers(),
                cache.batch,
                cfg.layers,
                batch
            )));
        }
        if cache.heads != self.attn_heads {
            return Err(Error::Invalid("prefix cache head layout mismatch".into()));
        }
        if input.x.rows() != batch * h || input.x.cols() != ACTION_DIM {
            return Err(Error::shape(
                "fast.action_in",
                format!("[{}, {}]", batch * h, ACTION_DIM),
                format!("{:?}", input.x.shape()),
            ));
        }
        let st = self.state_proj.forward(ps, input.state)?;
        let time = time_features(input.u, cfg.time_features);
        let tt = self.time_proj.forward(ps, &time)?;
        let ai = self.action_in.forward(ps, input.x)?;
        let pos = ps.value(self.action_pos);
        let mut x = Tensor::zeros(&[batch * t, w]);
        for b in 0..batch {
            let row = x.row_mut(b * t);
            for c in 0..w {
                row[c] = st.row(b)[c] + tt.row(b)[c];
            }
            for i in 0..h {
                let row = x.row_mut(b * t + 1 + i);
                for c in 0..w {
                    row[c] = ai.row(b * h + i)[c] + pos.row(i)[c];
                }
            }
        }
        let rows = self.action_rows(batch);
        let mut ctxs = Vec::with_capacity(cfg.layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let (normed, ln1) = layer.ln1.forward(ps, &x)?;
            let q = layer.q.forward(ps, &normed)?;
            let k = layer.k.forward(ps, &normed)?;
            let v = layer.v.forward(ps, &normed)?;
            let k_all = concat_groups(&cache.keys[l], &k, batch);
            let v_all = concat_groups(&cache.values[l], &v, batch);
            let (mixed, attn) = attention_forward(&q, &k_all, &v_all, self.attn_heads, batch)?;
            let mut x1 = layer.o.forward(ps, &mixed)?;
            x1.add_assign(&x);
            let za = gather_rows(&x1, &rows);
            let (upd, adapter) = layer.adapter.update(ps, &za, input.force_tokens, batch)?;
            scatter_add_rows(&mut x1, &rows, &upd);
            let (x2, mlp) = layer.mlp.forward(ps, &x1)?;
            ctxs.push(ExpertLayerCtx {
                ln1,
                normed,
                attn,
                mixed,
                adapter,
                mlp,
            });
            x = x2;
        }
        let xa = gather_rows(&x, &rows);
        let (final_normed, ln_out) = self.ln_out.forward(ps, &xa)?;
        let vel = self.head.forward(ps, &final_normed)?;
        if !vel.is_finite() {
            return Err(Error::NonFinite("expert velocity".into()));
        }
        Ok((
            vel,
            ExpertCtx {
                x: input.x.clone(),
                state: input.state.clone(),
                time,
                force_tokens: input.force_tokens.clone(),
                layers: ctxs,
                ln_out,
                final_normed,
                batch,
            },
        ))
    }

    pub fn vector_field_backward(
        &self,
        ps: &mut ParamStore,
        ctx: &ExpertCtx,
        d_vel: &Tensor,
        s_pre: usize,
    ) -> ExpertGrads {
        let cfg = &self.cfg;
        let batch = ctx.batch;
        let (h, w) = (cfg.horizon, cfg.width);
        let t = h + 1;
        let rows = self.action_rows(batch);
        let d_norm = self.head.backward(ps, &ctx.final_normed, d_vel);
        let d_xa = self.ln_out.backward(ps, &ctx.ln_out, &d_norm);
        let mut dx = Tensor::zeros(&[batch * t, w]);
        scatter_add_rows(&mut dx, &rows, &d_xa);
        let mut d_force = Tensor::zeros(ctx.force_tokens.shape());
        let mut d_cache = vec![(Tensor::zeros(&[0]), Tensor::zeros(&[0])); cfg.layers];
        for (l, (layer, c)) in self.layers.iter().zip(&ctx.layers).enumerate().rev() {
            let mut d_x1 = layer.mlp.backward(ps, &c.mlp, &dx);
            let d_upd = gather_rows(&d_x1, &rows);
            let (d_za, d_zf) =
                layer
                    .adapter
                    .update_backward(ps, &c.adapter, &ctx.force_tokens, &d_upd);
            d_force.add_assign(&d_zf);
            scatter_add_rows(&mut d_x1, &rows, &d_za);
            let d_mixed = layer.o.backward(ps, &c.mixed, &d_x1);
            let (dq, dk_all, dv_all) = attention_backward(&c.attn, &d_mixed);
            let (dk_cache, dk) = split_groups(&dk_all, s_pre, batch);
            let (dv_cache, dv) = split_groups(&dv_all, s_pre, batch);
            d_cache[l] = (dk_cache, dv_cache);
            let mut dn = layer.q.backward(ps, &c.normed, &dq);
            dn.add_assign(&layer.k.backward(ps, &c.normed, &dk));
            dn.add_assign(&layer.v.backward(ps, &c.normed, &dv));
            let mut d_in = layer.ln1.backward(ps, &c.ln1, &dn);
            d_in.add_assign(&d_x1);
            dx = d_in;
        }
        let mut d_st = Tensor::zeros(&[batch, w]);
        let mut d_ai = Tensor::zeros(&[batch * h, w]);
        {
            let gpos = ps.grad_mut(self.action_pos);
            for b in 0..batch {
                d_st.row_mut(b).copy_from_slice(dx.row(b * t));
                for i in 0..h {
                    let src = dx.row(b * t + 1 + i);
                    d_ai.row_mut(b * h + i).copy_from_slice(src);
                    for (g, s) in gpos.row_mut(i).iter_mut().zip(src) {
                        *g += s;
                    }
                }
            }
        }
        self.state_proj.backward(ps, &ctx.state, &d_st);
        self.time_proj.backward(ps, &ctx.time, &d_st);
        self.action_in.backward(ps, &ctx.x, &d_ai);
        ExpertGrads {
            cache: d_cache,
            force_tokens: d_force,
        }
    }

    /// Euler integration from `noise` (u = 0) to u = 1 for a single group.
    /// Returns the model-space sample `[H, 7]`, unclamped.
    pub fn integrate(
        &self,
        ps: &ParamStore,
        state: &Tensor,
        cache: &PrefixCache,
        force_tokens: &Tensor,
        noise: &Tensor,
        steps: usize,
    ) -> Result<FlowState> {
        if steps == 0 {
            return Err(Error::Invalid("at least one integration step".into()));
        }
        let mut flow = FlowState {
            x: noise.clone(),
            u: 0.0,
            steps: 0,
        };
        let dt = 1.0 / steps as f64;
        for k in 0..steps {
            let u = k as f64 * dt;
            let input = ExpertInput {
                x: &flow.x,
                u: &[u],
                state,
                cache,
                force_tokens,
            };
            let (vel, _) = self.vector_field(ps, &input)?;
            for (xi, vi) in flow.x.data_mut().iter_mut().zip(vel.data()) {
                *xi += dt * vi;
            }
            if !flow.x.is_finite() {
                return Err(Error::NonFinite(format!("flow state at step {k}")));
            }
            flow.u = (k + 1) as f64 * dt;
            flow.steps = k + 1;
        }
        Ok(flow)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &ForceAdapter> {
        self.layers.iter().map(|l| &l.adapter)
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }
}
