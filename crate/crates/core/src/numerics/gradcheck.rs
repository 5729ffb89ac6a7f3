use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamStore;
use crate::error::{Error, Result};

/// Which parameter entries a finite-difference check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum EntrySelection {
    All,
    /// Up to `count` seeded-random entries from every tensor.
    PerTensor { count: usize, seed: u64 },
}

/// Central difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    #[default]
    ThreePoint,
    /// Fourth-order `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`; lets
    /// `h` grow so roundoff stays below very small gradients.
    FivePoint,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central finite differences.
///
/// `objective(ps, with_grad)` returns the scalar loss; when `with_grad` is
/// set it must also accumulate gradients into the (zeroed) store.
pub fn grad_check<F>(
    ps: &mut ParamStore,
    objective: F,
    eps: f64,
    selection: EntrySelection,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    grad_check_with(ps, objective, eps, selection, Stencil::ThreePoint)
}

pub fn grad_check_with<F>(
    ps: &mut ParamStore,
    mut objective: F,
    eps: f64,
    selection: EntrySelection,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    if !ps.all_finite() {
        return Err(Error::NonFinite("parameters before gradient check".into()));
    }
    ps.zero_grads();
    let base = objective(ps, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let analytic: Vec<Vec<f64>> = ps.iter().map(|p| p.grad.data().to_vec()).collect();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = ps.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = ps.value(id).len();
        let entries: Vec<usize> = match selection {
            EntrySelection::All => (0..n).collect(),
            EntrySelection::PerTensor { count, seed } => {
                if count >= n {
                    (0..n).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9e37));
                    let mut v = sample(&mut rng, n, count).into_vec();
                    v.sort_unstable();
                    v
                }
            }
        };
        for e in entries {
            let orig = ps.value(id).data()[e];
            let mut at = |ps: &mut ParamStore, step: f64| -> Result<f64> {
                ps.value_mut(id).data_mut()[e] = orig + step;
                let l = objective(ps, false);
                ps.value_mut(id).data_mut()[e] = orig;
                match l? {
                    l if l.is_finite() => Ok(l),
                    _ => Err(Error::NonFinite("loss".into())),
                }
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(ps, eps)? - at(ps, -eps)?) / (2.0 * eps),
                Stencil::FivePoint => {
                    let (p2, p1) = (at(ps, 2.0 * eps)?, at(ps, eps)?);
                    let (m1, m2) = (at(ps, -eps)?, at(ps, -2.0 * eps)?);
                    (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * eps)
                }
            };
            let err = relative_error(analytic[pi][e], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ps.name(id).to_string(), e));
                report.worst_values = (analytic[pi][e], numeric);
            }
        }
    }
    Ok(report)
}
