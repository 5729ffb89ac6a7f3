//! Causal dilated temporal convolution tokenizer for force windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ForceWindow, FORCE_AXES};
use crate::error::{Error, Result};
use crate::numerics::ops::{gather_rows, scatter_add_rows, LayerNormCtx};
use crate::numerics::{Activation, CausalConv1d, Init, LayerNorm, Linear, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnConfig {
    pub width: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub tokens: usize,
    /// Window length `tau`.
    pub window: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            width: 32,
            kernel: 3,
            dilations: vec![1, 2, 4, 8],
            tokens: 4,
            window: 10,
        }
    }
}

/// `N_f x d_f` token matrix produced from one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceTokens(pub Tensor);

impl ForceTokens {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Row `floor((i+1) * tau / n) - 1` for token `i`: the last step of each
/// segment, so token `i` only sees inputs up to that step.
pub fn downsample_indices(tau: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || tau < n {
        return Err(Error::Invalid(format!(
            "cannot downsample {tau} steps to {n} tokens"
        )));
    }
    Ok((0..n).map(|i| (i + 1) * tau / n - 1).collect())
}

#[derive(Clone, Debug)]
struct TcnBlock {
    conv1: CausalConv1d,
    ln1: LayerNorm,
    conv2: CausalConv1d,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TcnEncoder {
    pub cfg: TcnConfig,
    input: Linear,
    blocks: Vec<TcnBlock>,
    picks: Vec<usize>,
}

#[derive(Clone, Debug)]
struct BlockCtx {
    c1: crate::numerics::ops::CausalConvCtx,
    n1: LayerNormCtx,
    pre1: Tensor,
    c2: crate::numerics::ops::CausalConvCtx,
    n2: LayerNormCtx,
    pre2: Tensor,
}

#[derive(Clone, Debug)]
pub struct TcnCtx {
    input: Tensor,
    blocks: Vec<BlockCtx>,
    batch: usize,
    rows: Vec<usize>,
    seq_rows: usize,
}

impl TcnEncoder {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        prefix: &str,
        cfg: TcnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let picks = downsample_indices(cfg.window, cfg.tokens)?;
        let input = Linear::new(
            ps,
            &format!("{prefix}.input"),
            FORCE_AXES,
            cfg.width,
            Init::FanIn,
            true,
            rng,
        )?;
        let mut blocks = Vec::with_capacity(cfg.dilations.len());
        for (i, &d) in cfg.dilations.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            blocks.push(TcnBlock {
                conv1: CausalConv1d::new(
                    ps,
                    &format!("{p}.conv1"),
                    cfg.width,
                    cfg.width,
                    cfg.kernel,
                    d,
                    rng,
                )?,
                ln1: LayerNorm::new(ps, &format!("{p}.ln1"), cfg.width, rng)?,
                conv2: CausalConv1d::new(
                    ps,
                    &format!("{p}.conv2"),
                    cfg.width,
                    cfg.width,
                    cfg.kernel,
                    d,
                    rng,
                )?,
                ln2: LayerNorm::new(ps, &format!("{p}.ln2"), cfg.width, rng)?,
            });
        }
        Ok(TcnEncoder {
            cfg,
            input,
            blocks,
            picks,
        })
    }

    /// Encodes `batch` windows stacked as `[batch * tau, 6]` into
    /// `[batch * tokens, width]`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, batch: usize) -> Result<(Tensor, TcnCtx)> {
        let tau = self.cfg.window;
        if x.rows() != batch * tau {
            return Err(Error::shape(
                "tcn",
                format!("[{}, {}]", batch * tau, FORCE_AXES),
                format!("{:?}", x.shape()),
            ));
        }
        let mut h = self.input.forward(ps, x)?;
        let mut ctxs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (o1, c1) = b.conv1.forward(ps, &h, batch)?;
            let (pre1, n1) = b.ln1.forward(ps, &o1)?;
            let a1 = Activation::Swish.forward(&pre1);
            let (o2, c2) = b.conv2.forward(ps, &a1, batch)?;
            let (pre2, n2) = b.ln2.forward(ps, &o2)?;
            let mut out = Activation::Swish.forward(&pre2);
            out.add_assign(&h);
            h = out;
            ctxs.push(BlockCtx {
                c1,
                n1,
                pre1,
                c2,
                n2,
                pre2,
            });
        }
        let rows: Vec<usize> = (0..batch)
            .flat_map(|b| self.picks.iter().map(move |&p| b * tau + p))
            .collect();
        let tokens = gather_rows(&h, &rows);
        Ok((
            tokens,
            TcnCtx {
                input: x.clone(),
                blocks: ctxs,
                batch,
                rows,
                seq_rows: h.rows(),
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the
    /// input windows.
    pub fn backward(&self, ps: &mut ParamStore, ctx: &TcnCtx, d_tokens: &Tensor) -> Tensor {
        let mut dh = Tensor::zeros(&[ctx.seq_rows, self.cfg.width]);
        scatter_add_rows(&mut dh, &ctx.rows, d_tokens);
        for (b, c) in self.blocks.iter().zip(&ctx.blocks).rev() {
            let d_pre2 = Activation::Swish.backward(&c.pre2, &dh);
            let d_o2 = b.ln2.backward(ps, &c.n2, &d_pre2);
            let d_a1 = b.conv2.backward(ps, &c.c2, &d_o2);
            let d_pre1 = Activation::Swish.backward(&c.pre1, &d_a1);
            let d_o1 = b.ln1.backward(ps, &c.n1, &d_pre1);
            let d_in = b.conv1.backward(ps, &c.c1, &d_o1);
            dh.add_assign(&d_in);
        }
        let _ = ctx.batch;
        self.input.backward(ps, &ctx.input, &dh)
    }

    /// Encodes one window as-is (no input normalization).
    pub fn encode_window(&self, ps: &ParamStore, window: &ForceWindow) -> Result<ForceTokens> {
        if window.len() != self.cfg.window {
            return Err(Error::shape(
                "tcn",
                format!("{} rows", self.cfg.window),
                window.len(),
            ));
        }
        let data: Vec<f64> = window.rows().flat_map(|r| r.iter().copied()).collect();
        let x = Tensor::matrix(window.len(), FORCE_AXES, data);
        Ok(ForceTokens(self.forward(ps, &x, 1)?.0))
    }
}

pub fn tcn_encode(
    encoder: &TcnEncoder,
    window: &ForceWindow,
    ps: &ParamStore,
) -> Result<ForceTokens> {
    encoder.encode_window(ps, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::force_features::{ForceSample, WindowKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(kind: WindowKind, seed: u64) -> ForceWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..10)
            .map(|i| ForceSample {
                t: i as f64 * 0.005,
                f: std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
            })
            .collect();
        ForceWindow::new(kind, samples, 10).unwrap()
    }

    fn encoder() -> (ParamStore, TcnEncoder) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TcnEncoder::new(&mut ps, "tcn", TcnConfig::default(), &mut rng).unwrap();
        (ps, enc)
    }

    #[test]
    fn downsampling_picks_segment_ends() {
        assert_eq!(downsample_indices(10, 4).unwrap(), vec![1, 4, 6, 9]);
        assert!(downsample_indices(3, 4).is_err());
    }

    #[test]
    fn perturbing_last_row_only_changes_last_token() {
        let (ps, enc) = encoder();
        let w = window(WindowKind::History, 1);
        let base = enc.encode_window(&ps, &w).unwrap();
        let mut samples = w.samples().to_vec();
        samples[9].f[2] += 3.0;
        let w2 = ForceWindow::new(WindowKind::History, samples, 10).unwrap();
        let pert = enc.encode_window(&ps, &w2).unwrap();
        for i in 0..3 {
            assert_eq!(base.0.row(i), pert.0.row(i));
        }
        assert_ne!(base.0.row(3), pert.0.row(3));
    }

    #[test]
    fn zero_window_with_zero_biases_gives_zero_tokens() {
        let (ps, enc) = encoder();
        let samples = (0..10)
            .map(|i| ForceSample {
                t: i as f64,
                f: [0.0; 6],
            })
            .collect();
        let w = ForceWindow::new(WindowKind::Latest, samples, 10).unwrap();
        let tokens = enc.encode_window(&ps, &w).unwrap();
        assert!(tokens.0.is_finite());
        assert!(tokens.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn history_and_latest_share_the_tokenizer() {
        let (ps, enc) = encoder();
        let h = window(WindowKind::History, 9);
        let l = ForceWindow::new(WindowKind::Latest, h.samples().to_vec(), 10).unwrap();
        assert_eq!(
            tcn_encode(&enc, &h, &ps).unwrap(),
            tcn_encode(&enc, &l, &ps).unwrap()
        );
    }

    #[test]
    fn short_window_is_rejected() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = TcnConfig {
            window: 3,
            ..Default::default()
        };
        assert!(TcnEncoder::new(&mut ps, "tcn", cfg, &mut rng).is_err());
    }
}
