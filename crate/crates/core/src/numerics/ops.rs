//! Differentiable kernels with hand-written backward passes.
//!
//! Every forward returns whatever the matching backward needs; callers own
//! those contexts. Parameter gradients are accumulated additively.

use rand::Rng;

use super::tensor::gemm;
use super::{Init, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Affine map `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        w_init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = ps.add_init(&format!("{name}.w"), &[in_dim, out_dim], w_init, rng)?;
        let b = if bias {
            Some(ps.add_init(&format!("{name}.b"), &[out_dim], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Linear {
            name: name.to_string(),
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.expect_cols(&self.name, self.in_dim)?;
        let n = x.rows();
        let mut y = vec![0.0; n * self.out_dim];
        if let Some(b) = self.b {
            let bias = ps.value(b).data();
            for row in y.chunks_exact_mut(self.out_dim) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            n,
            self.in_dim,
            self.out_dim,
            x.data(),
            false,
            ps.value(self.w).data(),
            false,
            &mut y,
            if self.b.is_some() { 1.0 } else { 0.0 },
        );
        Ok(Tensor::matrix(n, self.out_dim, y))
    }

    pub fn backward(&self, ps: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Tensor {
        let n = x.rows();
        assert_eq!(dy.rows(), n);
        let mut dx = vec![0.0; n * self.in_dim];
        {
            let p = ps.param_mut(self.w);
            gemm(
                n,
                self.out_dim,
                self.in_dim,
                dy.data(),
                false,
                p.value.data(),
                true,
                &mut dx,
                0.0,
            );
            gemm(
                self.in_dim,
                n,
                self.out_dim,
                x.data(),
                true,
                dy.data(),
                false,
                p.grad.data_mut(),
                1.0,
            );
        }
        if let Some(b) = self.b {
            let g = ps.grad_mut(b).data_mut();
            for row in dy.data().chunks_exact(self.out_dim) {
                for (gi, r) in g.iter_mut().zip(row) {
                    *gi += r;
                }
            }
        }
        Tensor::matrix(n, self.in_dim, dx)
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCtx {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let gamma = ps.add_init(&format!("{name}.g"), &[dim], Init::Ones, rng)?;
        let beta = ps.add_init(&format!("{name}.b"), &[dim], Init::Zeros, rng)?;
        Ok(LayerNorm {
            name: name.to_string(),
            gamma,
            beta,
            dim,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerNormCtx)> {
        x.expect_cols(&self.name, self.dim)?;
        let n = x.rows();
        let d = self.dim;
        let g = ps.value(self.gamma).data();
        let b = ps.value(self.beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut y = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = (var + LAYER_NORM_EPS).sqrt().recip();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                y[r * d + c] = g[c] * h + b[c];
            }
        }
        Ok((
            Tensor::matrix(n, d, y),
            LayerNormCtx {
                xhat: Tensor::matrix(n, d, xhat),
                inv_std,
            },
        ))
    }

    pub fn backward(&self, ps: &mut ParamStore, ctx: &LayerNormCtx, dy: &Tensor) -> Tensor {
        let n = dy.rows();
        let d = self.dim;
        let mut dx = vec![0.0; n * d];
        {
            let gamma = ps.value(self.gamma).data().to_vec();
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for r in 0..n {
                let dyr = dy.row(r);
                let xh = ctx.xhat.row(r);
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for c in 0..d {
                    dg[c] += dyr[c] * xh[c];
                    db[c] += dyr[c];
                    let dxh = dyr[c] * gamma[c];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[c];
                }
                mean_dxh /= d as f64;
                mean_dxh_xh /= d as f64;
                let is = ctx.inv_std[r];
                for c in 0..d {
                    let dxh = dyr[c] * gamma[c];
                    dx[r * d + c] = is * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                }
            }
            for (a, v) in ps.grad_mut(self.gamma).data_mut().iter_mut().zip(&dg) {
                *a += v;
            }
            for (a, v) in ps.grad_mut(self.beta).data_mut().iter_mut().zip(&db) {
                *a += v;
            }
        }
        Tensor::matrix(n, d, dx)
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation of GELU.
    Gelu,
    /// `x * sigmoid(x)`.
    Swish,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Swish => x * sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| self.apply(v)).collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    pub fn backward(self, x: &Tensor, dy: &Tensor) -> Tensor {
        let data = x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| g * self.derivative(v))
            .collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    out
}

/// Backward of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let c = y.cols();
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(c)
        .zip(dy.data().chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..c {
            dr[i] = yr[i] * (gr[i] - s);
        }
    }
    Tensor::from_vec(y.shape(), dx).expect("same shape")
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Saved state of a scaled dot-product attention call.
#[derive(Clone, Debug)]
pub struct AttentionCtx {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<f64>,
    batch: usize,
    sq: usize,
    sk: usize,
    heads: usize,
}

impl AttentionCtx {
    /// Attention weights for `(batch, head, query)` over keys.
    pub fn weights(&self, b: usize, h: usize, i: usize) -> &[f64] {
        let off = ((b * self.heads + h) * self.sq + i) * self.sk;
        &self.probs[off..off + self.sk]
    }
}

/// Multi-head scaled dot-product attention over `batch` independent groups.
///
/// `q` is `[batch * sq, width]`, `k` and `v` are `[batch * sk, width]`, with
/// each group's rows contiguous. Heads split the width evenly.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    batch: usize,
) -> Result<(Tensor, AttentionCtx)> {
    let width = q.cols();
    if heads == 0 || width % heads != 0 {
        return Err(Error::Invalid(format!(
            "attention width {width} not divisible by {heads} heads"
        )));
    }
    if k.cols() != width || v.cols() != width {
        return Err(Error::shape(
            "attention",
            format!("key/value width {width}"),
            format!("{} / {}", k.cols(), v.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(
            "attention",
            format!("{} value rows", k.rows()),
            v.rows(),
        ));
    }
    if batch == 0 || q.rows() % batch != 0 || k.rows() % batch != 0 {
        return Err(Error::Invalid(format!(
            "rows {}/{} not divisible into {batch} groups",
            q.rows(),
            k.rows()
        )));
    }
    let sq = q.rows() / batch;
    let sk = k.rows() / batch;
    if sk == 0 {
        return Err(Error::EmptyKeys);
    }
    let dh = width / heads;
    let scale = (dh as f64).sqrt().recip();
    let mut probs = vec![0.0; batch * heads * sq * sk];
    let mut out = vec![0.0; q.len()];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..sq {
                let qrow = &qd[(b * sq + i) * width + col..][..dh];
                let off = ((b * heads + h) * sq + i) * sk;
                let p = &mut probs[off..off + sk];
                for (j, pj) in p.iter_mut().enumerate() {
                    let krow = &kd[(b * sk + j) * width + col..][..dh];
                    *pj = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(p);
                let orow = &mut out[(b * sq + i) * width + col..][..dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vrow = &vd[(b * sk + j) * width + col..][..dh];
                    for (o, vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::matrix(q.rows(), width, out),
        AttentionCtx {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
            batch,
            sq,
            sk,
            heads,
        },
    ))
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward(ctx: &AttentionCtx, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let width = ctx.q.cols();
    let (batch, sq, sk, heads) = (ctx.batch, ctx.sq, ctx.sk, ctx.heads);
    let dh = width / heads;
    let scale = (dh as f64).sqrt().recip();
    let mut dq = vec![0.0; ctx.q.len()];
    let mut dk = vec![0.0; ctx.k.len()];
    let mut dv = vec![0.0; ctx.v.len()];
    let (qd, kd, vd, god) = (ctx.q.data(), ctx.k.data(), ctx.v.data(), dout.data());
    let mut ds = vec![0.0; sk];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..sq {
                let p = ctx.weights(b, h, i);
                let go = &god[(b * sq + i) * width + col..][..dh];
                let mut s = 0.0;
                for j in 0..sk {
                    let vrow = &vd[(b * sk + j) * width + col..][..dh];
                    let dp: f64 = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    ds[j] = dp;
                    s += p[j] * dp;
                }
                let qrow = &qd[(b * sq + i) * width + col..][..dh];
                for j in 0..sk {
                    let dsj = p[j] * (ds[j] - s) * scale;
                    let krow = &kd[(b * sk + j) * width + col..][..dh];
                    let dqrow = &mut dq[(b * sq + i) * width + col..][..dh];
                    for (a, kk) in dqrow.iter_mut().zip(krow) {
                        *a += dsj * kk;
                    }
                    let dkrow = &mut dk[(b * sk + j) * width + col..][..dh];
                    for (a, qq) in dkrow.iter_mut().zip(qrow) {
                        *a += dsj * qq;
                    }
                    let dvrow = &mut dv[(b * sk + j) * width + col..][..dh];
                    for (a, g) in dvrow.iter_mut().zip(go) {
                        *a += p[j] * g;
                    }
                }
            }
        }
    }
    (
        Tensor::matrix(ctx.q.rows(), width, dq),
        Tensor::matrix(ctx.k.rows(), width, dk),
        Tensor::matrix(ctx.v.rows(), width, dv),
    )
}

/// Attention of `queries` against externally supplied keys and values, e.g.
/// a cached prefix. All operands are `[rows, n_heads * d_h]`.
pub fn attention_with_external_kv(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    n_heads: usize,
) -> Result<Tensor> {
    if keys.rows() == 0 {
        return Err(Error::EmptyKeys);
    }
    attention_forward(queries, keys, values, n_heads, 1).map(|(o, _)| o)
}

/// Causal dilated 1-D convolution over `[batch * time, in]` sequences.
///
/// Output at step `t` reads inputs `t - (kernel-1-k) * dilation` for
/// `k = 0..kernel`, zero-padded on the left.
#[derive(Clone, Debug)]
pub struct CausalConv1d {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub struct CausalConvCtx {
    cols: Tensor,
    batch: usize,
}

impl CausalConv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel == 0 || dilation == 0 {
            return Err(Error::Invalid(format!(
                "{name}: kernel and dilation must be positive"
            )));
        }
        let w = ps.add_init(
            &format!("{name}.w"),
            &[kernel * in_dim, out_dim],
            Init::FanIn,
            rng,
        )?;
        let b = ps.add_init(&format!("{name}.b"), &[out_dim], Init::Zeros, rng)?;
        Ok(CausalConv1d {
            name: name.to_string(),
            w,
            b,
            in_dim,
            out_dim,
            kernel,
            dilation,
        })
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        batch: usize,
    ) -> Result<(Tensor, CausalConvCtx)> {
        x.expect_cols(&self.name, self.in_dim)?;
        if batch == 0 || x.rows() % batch != 0 {
            return Err(Error::shape(
                &self.name,
                format!("rows divisible by batch {batch}"),
                x.rows(),
            ));
        }
        let t_len = x.rows() / batch;
        let kc = self.kernel * self.in_dim;
        let mut cols = vec![0.0; x.rows() * kc];
        for b in 0..batch {
            for t in 0..t_len {
                for k in 0..self.kernel {
                    let lag = (self.kernel - 1 - k) * self.dilation;
                    if t >= lag {
                        let src = x.row(b * t_len + t - lag);
                        let dst = (b * t_len + t) * kc + k * self.in_dim;
                        cols[dst..dst + self.in_dim].copy_from_slice(src);
                    }
                }
            }
        }
        let n = x.rows();
        let mut y = vec![0.0; n * self.out_dim];
        let bias = ps.value(self.b).data();
        for row in y.chunks_exact_mut(self.out_dim) {
            row.copy_from_slice(bias);
        }
        gemm(
            n,
            kc,
            self.out_dim,
            &cols,
            false,
            ps.value(self.w).data(),
            false,
            &mut y,
            1.0,
        );
        Ok((
            Tensor::matrix(n, self.out_dim, y),
            CausalConvCtx {
                cols: Tensor::matrix(n, kc, cols),
                batch,
            },
        ))
    }

    pub fn backward(&self, ps: &mut ParamStore, ctx: &CausalConvCtx, dy: &Tensor) -> Tensor {
        let n = dy.rows();
        let kc = self.kernel * self.in_dim;
        let mut dcols = vec![0.0; n * kc];
        {
            let p = ps.param_mut(self.w);
            gemm(
                n,
                self.out_dim,
                kc,
                dy.data(),
                false,
                p.value.data(),
                true,
                &mut dcols,
                0.0,
            );
            gemm(
                kc,
                n,
                self.out_dim,
                ctx.cols.data(),
                true,
                dy.data(),
                false,
                p.grad.data_mut(),
                1.0,
            );
        }
        {
            let g = ps.grad_mut(self.b).data_mut();
            for row in dy.data().chunks_exact(self.out_dim) {
                for (gi, r) in g.iter_mut().zip(row) {
                    *gi += r;
                }
            }
        }
        let t_len = n / ctx.batch;
        let mut dx = vec![0.0; n * self.in_dim];
        for b in 0..ctx.batch {
            for t in 0..t_len {
                for k in 0..self.kernel {
                    let lag = (self.kernel - 1 - k) * self.dilation;
                    if t >= lag {
                        let src = (b * t_len + t) * kc + k * self.in_dim;
                        let dst = (b * t_len + t - lag) * self.in_dim;
                        for c in 0..self.in_dim {
                            dx[dst + c] += dcols[src + c];
                        }
                    }
                }
            }
        }
        Tensor::matrix(n, self.in_dim, dx)
    }
}

/// Multi-head attention with its own query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttentionCtx {
    xq: Tensor,
    xkv: Tensor,
    attn: AttentionCtx,
    mixed: Tensor,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        inner: usize,
        heads: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || inner % heads != 0 {
            return Err(Error::Invalid(format!(
                "{name}: {heads} heads do not divide width {inner}"
            )));
        }
        Ok(MultiHeadAttention {
            name: name.to_string(),
            q: Linear::new(ps, &format!("{name}.q"), q_dim, inner, Init::FanIn, false, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), kv_dim, inner, Init::FanIn, false, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), kv_dim, inner, Init::FanIn, false, rng)?,
            o: Linear::new(ps, &format!("{name}.o"), inner, q_dim, out_init, true, rng)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        xq: &Tensor,
        xkv: &Tensor,
        batch: usize,
    ) -> Result<(Tensor, MultiHeadAttentionCtx)> {
        let q = self.q.forward(ps, xq)?;
        let k = self.k.forward(ps, xkv)?;
        let v = self.v.forward(ps, xkv)?;
        let (mixed, attn) = attention_forward(&q, &k, &v, self.heads, batch)?;
        let out = self.o.forward(ps, &mixed)?;
        Ok((
            out,
            MultiHeadAttentionCtx {
                xq: xq.clone(),
                xkv: xkv.clone(),
                attn,
                mixed,
            },
        ))
    }

    /// Returns `(d_xq, d_xkv)`.
    pub fn backward(
        &self,
        ps: &mut ParamStore,
        ctx: &MultiHeadAttentionCtx,
        dout: &Tensor,
    ) -> (Tensor, Tensor) {
        let dmixed = self.o.backward(ps, &ctx.mixed, dout);
        let (dq, dk, dv) = attention_backward(&ctx.attn, &dmixed);
        let dxq = self.q.backward(ps, &ctx.xq, &dq);
        let mut dxkv = self.k.backward(ps, &ctx.xkv, &dk);
        dxkv.add_assign(&self.v.backward(ps, &ctx.xkv, &dv));
        (dxq, dxkv)
    }
}

pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), c, data)
}

/// Adds row `k` of `src` into row `idx[k]` of `dst`.
pub fn scatter_add_rows(dst: &mut Tensor, idx: &[usize], src: &Tensor) {
    for (k, &i) in idx.iter().enumerate() {
        for (d, s) in dst.row_mut(i).iter_mut().zip(src.row(k)) {
            *d += s;
        }
    }
}

/// Inverted dropout with an explicit keep-mask (already scaled by 1/keep).
pub fn apply_mask(x: &Tensor, mask: &[f64]) -> Tensor {
    assert_eq!(x.len(), mask.len());
    let data = x.data().iter().zip(mask).map(|(a, m)| a * m).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn linear_identity_weight_is_identity() {
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "lin", 3, 3, Init::Zeros, true, &mut rng()).unwrap();
        let w = ps.value_mut(lin.w).data_mut();
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(lin.forward(&ps, &x).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn linear_adjoint_returns_weight_row() {
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "lin", 4, 3, Init::FanIn, true, &mut rng()).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.1]);
        let w = ps.value(lin.w).clone();
        // y = x W with W: [in, out]; e_i on the output picks column i of W,
        // i.e. row i of the [out, in] matrix the map represents.
        for i in 0..3 {
            let mut e = vec![0.0; 3];
            e[i] = 1.0;
            let dx = lin.backward(&mut ps, &x, &Tensor::matrix(1, 3, e));
            let expected: Vec<f64> = (0..4).map(|r| w.data()[r * 3 + i]).collect();
            assert_eq!(dx.data(), expected.as_slice());
        }
    }

    #[test]
    fn linear_rejects_wrong_width_with_layer_name() {
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "proj", 4, 3, Init::FanIn, true, &mut rng()).unwrap();
        let err = lin.forward(&ps, &Tensor::zeros(&[2, 5])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("proj") && msg.contains("[_, 4]") && msg.contains("[2, 5]"));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax_rows(&Tensor::matrix(1, 4, vec![0.0; 4]));
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let y = softmax_rows(&Tensor::matrix(1, 2, vec![1000.0, 0.0]));
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut ps = ParamStore::new();
        let ln = LayerNorm::new(&mut ps, "ln", 5, &mut rng()).unwrap();
        let (y, _) = ln.forward(&ps, &Tensor::full(&[1, 5], 3.7)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let q = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.7).collect());
        let k = Tensor::matrix(1, 4, vec![0.3, -0.2, 1.0, 4.0]);
        let v = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let out = attention_with_external_kv(&q, &k, &v, 2).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn uniform_keys_average_values() {
        let q = Tensor::matrix(2, 4, vec![0.1, 0.9, -0.5, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let k = Tensor::full(&[3, 4], 0.4);
        let v = Tensor::matrix(3, 4, (0..12).map(|i| i as f64).collect());
        let out = attention_with_external_kv(&q, &k, &v, 2).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let mean = (v.row(0)[c] + v.row(1)[c] + v.row(2)[c]) / 3.0;
                assert!((out.row(r)[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_keys_are_rejected() {
        let q = Tensor::zeros(&[1, 4]);
        let k = Tensor::zeros(&[0, 4]);
        assert!(matches!(
            attention_with_external_kv(&q, &k, &k, 2),
            Err(Error::EmptyKeys)
        ));
    }

    #[test]
    fn single_key_value_gradient_is_weight_times_upstream() {
        // With one key the softmax weight is exactly 1 for every query, so
        // dV = sum_i 1 * dO_i and dK = 0.
        let q = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.5]);
        let k = Tensor::matrix(1, 2, vec![0.7, 0.1]);
        let v = Tensor::matrix(1, 2, vec![-0.4, 0.9]);
        let (_, ctx) = attention_forward(&q, &k, &v, 1, 1).unwrap();
        let go = Tensor::matrix(2, 2, vec![1.0, 2.0, -0.5, 0.25]);
        let (dq, dk, dv) = attention_backward(&ctx, &go);
        assert_eq!(ctx.weights(0, 0, 0), &[1.0]);
        assert!((dv.data()[0] - 0.5).abs() < 1e-15);
        assert!((dv.data()[1] - 2.25).abs() < 1e-15);
        assert!(dk.data().iter().all(|v| v.abs() < 1e-15));
        assert!(dq.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn causal_conv_ignores_future_rows() {
        let mut ps = ParamStore::new();
        let conv = CausalConv1d::new(&mut ps, "c", 2, 3, 3, 2, &mut rng()).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::matrix(8, 2, x);
        let (y0, _) = conv.forward(&ps, &x, 1).unwrap();
        let mut x2 = x.clone();
        x2.row_mut(5)[0] += 1.0;
        let (y1, _) = conv.forward(&ps, &x2, 1).unwrap();
        for t in 0..5 {
            assert_eq!(y0.row(t), y1.row(t));
        }
        assert_ne!(y0.row(5), y1.row(5));
    }
}
