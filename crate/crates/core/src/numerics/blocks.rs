//! Small composite blocks shared by the transformer stacks.

use rand::Rng;

use super::ops::{LayerNormCtx, Linear};
use super::{Activation, Init, LayerNorm, ParamStore, Tensor};
use crate::error::Result;

/// Pre-norm residual MLP: `x + fc2(gelu(fc1(ln(x))))`.
#[derive(Clone, Debug)]
pub struct ResidualMlp {
    ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct ResidualMlpCtx {
    ln: LayerNormCtx,
    normed: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl ResidualMlp {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ResidualMlp {
            ln: LayerNorm::new(ps, &format!("{name}.ln"), width, rng)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), width, hidden, Init::FanIn, true, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, width, Init::FanIn, true, rng)?,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, ResidualMlpCtx)> {
        let (normed, ln) = self.ln.forward(ps, x)?;
        let pre = self.fc1.forward(ps, &normed)?;
        let act = Activation::Gelu.forward(&pre);
        let mut y = self.fc2.forward(ps, &act)?;
        y.add_assign(x);
        Ok((
            y,
            ResidualMlpCtx {
                ln,
                normed,
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, ps: &mut ParamStore, ctx: &ResidualMlpCtx, dy: &Tensor) -> Tensor {
        let d_act = self.fc2.backward(ps, &ctx.act, dy);
        let d_pre = Activation::Gelu.backward(&ctx.pre, &d_act);
        let d_norm = self.fc1.backward(ps, &ctx.normed, &d_pre);
        let mut dx = self.ln.backward(ps, &ctx.ln, &d_norm);
        dx.add_assign(dy);
        dx
    }
}

/// Interleaves per-group row blocks: group `g` of the result is group `g` of
/// `a` followed by group `g` of `b`.
pub fn concat_groups(a: &Tensor, b: &Tensor, groups: usize) -> Tensor {
    let w = a.cols();
    assert_eq!(b.cols(), w);
    let (ra, rb) = (a.rows() / groups, b.rows() / groups);
    let mut data = Vec::with_capacity((a.rows() + b.rows()) * w);
    for g in 0..groups {
        data.extend_from_slice(&a.data()[g * ra * w..(g + 1) * ra * w]);
        data.extend_from_slice(&b.data()[g * rb * w..(g + 1) * rb * w]);
    }
    Tensor::matrix(a.rows() + b.rows(), w, data)
}

/// Inverse of [`concat_groups`] given the first block's rows per group.
pub fn split_groups(x: &Tensor, rows_a: usize, groups: usize) -> (Tensor, Tensor) {
    let w = x.cols();
    let per = x.rows() / groups;
    let rows_b = per - rows_a;
    let mut a = Vec::with_capacity(groups * rows_a * w);
    let mut b = Vec::with_capacity(groups * rows_b * w);
    for g in 0..groups {
        let base = g * per * w;
        a.extend_from_slice(&x.data()[base..base + rows_a * w]);
        b.extend_from_slice(&x.data()[base + rows_a * w..base + per * w]);
    }
    (
        Tensor::matrix(groups * rows_a, w, a),
        Tensor::matrix(groups * rows_b, w, b),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::matrix(4, 2, (0..8).map(f64::from).collect());
        let b = Tensor::matrix(6, 2, (100..112).map(f64::from).collect());
        let c = concat_groups(&a, &b, 2);
        assert_eq!(c.row(2), b.row(0));
        assert_eq!(c.row(5), a.row(2));
        let (a2, b2) = split_groups(&c, 2, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
