//! Layer-level interface: a [`LayerSpec`] describes a kernel, a [`Layer`]
//! owns its parameter handles and the activations recorded by `forward`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    Activation, CausalConv1d, CausalConvCtx, LayerNorm, LayerNormCtx, Linear, MultiHeadAttention,
    MultiHeadAttentionCtx,
};
use super::{Init, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    LayerNorm {
        dim: usize,
    },
    /// Standard multi-head attention (not grouped-query). Queries come from
    /// the first input, keys/values from the second (or the first).
    Attention {
        width: usize,
        kv_dim: usize,
        heads: usize,
    },
    CausalConv1d {
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        dilation: usize,
    },
    Activation {
        function: Activation,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |vals: &[usize]| vals.iter().all(|&v| v > 0);
        let ok = match &self.kind {
            LayerKind::Linear { in_dim, out_dim } => positive(&[*in_dim, *out_dim]),
            LayerKind::LayerNorm { dim } => positive(&[*dim]),
            LayerKind::Attention {
                width,
                kv_dim,
                heads,
            } => positive(&[*width, *kv_dim, *heads]) && width % heads == 0,
            LayerKind::CausalConv1d {
                in_dim,
                out_dim,
                kernel,
                dilation,
            } => positive(&[*in_dim, *out_dim, *kernel, *dilation]),
            LayerKind::Activation { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "layer {}: invalid hyperparameters {:?}",
                self.name, self.kind
            )))
        }
    }
}

#[derive(Clone, Debug)]
enum Kernel {
    Linear(Linear),
    LayerNorm(LayerNorm),
    Attention(MultiHeadAttention),
    Conv(CausalConv1d),
    Act(Activation),
}

#[derive(Clone, Debug)]
enum Saved {
    Input(Tensor),
    LayerNorm(LayerNormCtx),
    Attention(MultiHeadAttentionCtx, bool),
    Conv(CausalConvCtx),
}

#[derive(Clone, Debug)]
pub struct Layer {
    spec: LayerSpec,
    kernel: Kernel,
    saved: Option<Saved>,
}

impl Layer {
    pub fn new<R: Rng>(spec: LayerSpec, ps: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let name = spec.name.as_str();
        let kernel = match spec.kind {
            LayerKind::Linear { in_dim, out_dim } => Kernel::Linear(Linear::new(
                ps,
                name,
                in_dim,
                out_dim,
                Init::FanIn,
                true,
                rng,
            )?),
            LayerKind::LayerNorm { dim } => Kernel::LayerNorm(LayerNorm::new(ps, name, dim, rng)?),
            LayerKind::Attention {
                width,
                kv_dim,
                heads,
            } => Kernel::Attention(MultiHeadAttention::new(
                ps,
                name,
                width,
                kv_dim,
                width,
                heads,
                Init::FanIn,
                rng,
            )?),
            LayerKind::CausalConv1d {
                in_dim,
                out_dim,
                kernel,
                dilation,
            } => Kernel::Conv(CausalConv1d::new(
                ps, name, in_dim, out_dim, kernel, dilation, rng,
            )?),
            LayerKind::Activation { function } => Kernel::Act(function),
        };
        Ok(Layer {
            spec,
            kernel,
            saved: None,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn forward(&mut self, ps: &ParamStore, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = *inputs.first().ok_or_else(|| {
            Error::Invalid(format!("layer {}: forward needs an input", self.spec.name))
        })?;
        let (y, saved) = match &self.kernel {
            Kernel::Linear(l) => (l.forward(ps, x)?, Saved::Input(x.clone())),
            Kernel::LayerNorm(l) => {
                let (y, ctx) = l.forward(ps, x)?;
                (y, Saved::LayerNorm(ctx))
            }
            Kernel::Attention(a) => {
                let cross = inputs.len() > 1;
                let kv = if cross { inputs[1] } else { x };
                let (y, ctx) = a.forward(ps, x, kv, 1)?;
                (y, Saved::Attention(ctx, cross))
            }
            Kernel::Conv(c) => {
                let (y, ctx) = c.forward(ps, x, 1)?;
                (y, Saved::Conv(ctx))
            }
            Kernel::Act(f) => (f.forward(x), Saved::Input(x.clone())),
        };
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("layer {}", self.spec.name)));
        }
        self.saved = Some(saved);
        Ok(y)
    }

    /// Returns one gradient per forward input; parameter gradients are
    /// accumulated into `ps`.
    pub fn backward(&mut self, ps: &mut ParamStore, grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let saved = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::BackwardBeforeForward(self.spec.name.clone()))?;
        let grads = match (&self.kernel, saved) {
            (Kernel::Linear(l), Saved::Input(x)) => vec![l.backward(ps, x, grad_out)],
            (Kernel::LayerNorm(l), Saved::LayerNorm(ctx)) => vec![l.backward(ps, ctx, grad_out)],
            (Kernel::Attention(a), Saved::Attention(ctx, cross)) => {
                let (dq, dkv) = a.backward(ps, ctx, grad_out);
                if *cross {
                    vec![dq, dkv]
                } else {
                    let mut d = dq;
                    d.add_assign(&dkv);
                    vec![d]
                }
            }
            (Kernel::Conv(c), Saved::Conv(ctx)) => vec![c.backward(ps, ctx, grad_out)],
            (Kernel::Act(f), Saved::Input(x)) => vec![f.backward(x, grad_out)],
            _ => unreachable!("saved activations always match the kernel"),
        };
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backward_before_forward_is_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let spec = LayerSpec::new("l", LayerKind::Linear { in_dim: 2, out_dim: 2 });
        let mut layer = Layer::new(spec, &mut ps, &mut rng).unwrap();
        assert!(matches!(
            layer.backward(&mut ps, &Tensor::zeros(&[1, 2])),
            Err(Error::BackwardBeforeForward(_))
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        let spec = LayerSpec::new(
            "a",
            LayerKind::Attention {
                width: 10,
                kv_dim: 10,
                heads: 3,
            },
        );
        assert!(spec.validate().is_err());
        let spec = LayerSpec::new("c", LayerKind::LayerNorm { dim: 0 });
        assert!(spec.validate().is_err());
    }
}
