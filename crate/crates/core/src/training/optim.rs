use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros = || ps.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update using the gradients held in `ps`.
pub fn adam_step(ps: &mut ParamStore, state: &mut AdamState, hyper: &AdamHyper, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - lr * hyper.weight_decay;
    for ((p, m), v) in ps.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w = *w * decay - lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
}

/// Scales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(ps: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = ps.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in ps.iter_mut() {
            p.grad.scale(s);
        }
    }
    norm
}

/// Linear warmup, then cosine decay from `lr` to `lr_final` at `total`.
pub fn cosine_lr(iter: usize, total: usize, warmup: usize, lr: f64, lr_final: f64) -> f64 {
    if iter < warmup {
        return lr * (iter + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((iter - warmup) as f64 / span as f64).min(1.0);
    lr_final + 0.5 * (lr - lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>, grads: Vec<f64>) -> ParamStore {
        let mut ps = ParamStore::new();
        let n = values.len();
        let id = ps.add("w", Tensor::matrix(1, n, values)).unwrap();
        ps.grad_mut(id).data_mut().copy_from_slice(&grads);
        ps
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut ps = store(vec![0.5, -2.0], vec![0.0, 0.0]);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, &AdamHyper::default(), 1e-2);
        assert_eq!(ps.iter().next().unwrap().value.data(), &[0.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let g = [0.3, -4.0, 1e-3];
        let mut ps = store(vec![0.0; 3], g.to_vec());
        let mut st = AdamState::new(&ps);
        let h = AdamHyper::default();
        let lr = 1e-3;
        adam_step(&mut ps, &mut st, &h, lr);
        for (w, gi) in ps.iter().next().unwrap().value.data().iter().zip(g) {
            // m_hat = g, v_hat = g^2 after bias correction.
            let expect = -lr * gi / (gi.abs() + h.eps);
            assert!((w - expect).abs() < 1e-15, "{w} vs {expect}");
            assert!((w.abs() - lr).abs() < 1e-7);
        }
    }

    #[test]
    fn weight_decay_alone_shrinks() {
        let mut ps = store(vec![2.0, -1.0], vec![0.0, 0.0]);
        let mut st = AdamState::new(&ps);
        let h = AdamHyper {
            weight_decay: 0.1,
            ..AdamHyper::default()
        };
        adam_step(&mut ps, &mut st, &h, 0.01);
        let f = 1.0 - 0.01 * 0.1;
        assert_eq!(ps.iter().next().unwrap().value.data(), &[2.0 * f, -1.0 * f]);
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0, 100, 0, 3e-4, 3e-5) - 3e-4).abs() < 1e-18);
        assert!((cosine_lr(100, 100, 0, 3e-4, 3e-5) - 3e-5).abs() < 1e-18);
        assert!((cosine_lr(4, 100, 10, 1.0, 0.0) - 0.5).abs() < 1e-12);
    }
}
