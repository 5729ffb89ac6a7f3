//! Force-variance supervision labels: axis-weighted variance over the
//! future window, EMA over frames, then `tanh(sqrt(nu_bar) / sigma)`.

use serde::{Deserialize, Serialize};

use super::FORCE_AXES;
use crate::error::{Error, Result};

/// Largest label value; keeps labels strictly below one when tanh saturates.
pub const LABEL_MAX: f64 = 1.0 - f64::EPSILON;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceLabelConfig {
    /// Future window length in frames.
    pub window: usize,
    pub weights: [f64; FORCE_AXES],
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for VarianceLabelConfig {
    fn default() -> Self {
        VarianceLabelConfig {
            window: 32,
            weights: [1.0 / 6.0; FORCE_AXES],
            alpha: 0.3,
            sigma: 1.0,
        }
    }
}

impl VarianceLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!(
                "label window must be >= 2, got {}",
                self.window
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("label weights must be non-negative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("label weights sum to {sum}, not 1")));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

/// `sum_j w_j * Var(column j)`, population variance.
pub fn raw_variance(future: &[[f64; FORCE_AXES]], weights: &[f64; FORCE_AXES]) -> Result<f64> {
    if future.len() < 2 {
        return Err(Error::Invalid(format!(
            "variance window needs >= 2 rows, got {}",
            future.len()
        )));
    }
    if future.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("force window".into()));
    }
    let n = future.len() as f64;
    let mut nu = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        // shifted by the first row so constant columns give exactly zero
        let shift = future[0][j];
        let mean = future.iter().map(|r| r[j] - shift).sum::<f64>() / n;
        let var = future
            .iter()
            .map(|r| (r[j] - shift - mean).powi(2))
            .sum::<f64>()
            / n;
        nu += w * var;
    }
    Ok(nu)
}

pub fn ema_smooth(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Invalid("EMA over an empty series".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut acc = series[0];
    out.push(acc);
    for &v in &series[1..] {
        acc = alpha * v + (1.0 - alpha) * acc;
        out.push(acc);
    }
    Ok(out)
}

pub fn normalize_variance(nu_bar: f64, sigma: f64) -> Result<f64> {
    if nu_bar < 0.0 || !nu_bar.is_finite() {
        return Err(Error::Invalid(format!("smoothed variance {nu_bar} must be >= 0")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma {sigma} must be positive")));
    }
    Ok((nu_bar.sqrt() / sigma).tanh().min(LABEL_MAX))
}

/// Raw variance for every frame that has a full future window.
pub fn raw_variance_series(
    forces: &[[f64; FORCE_AXES]],
    cfg: &VarianceLabelConfig,
) -> Result<Vec<f64>> {
    if forces.len() < cfg.window + 1 {
        return Err(Error::Invalid(format!(
            "episode of {} frames is shorter than window + 1 = {}",
            forces.len(),
            cfg.window + 1
        )));
    }
    (0..=forces.len() - cfg.window)
        .map(|t| raw_variance(&forces[t..t + cfg.window], &cfg.weights))
        .collect()
}

/// EMA-smoothed raw variance for every full-window frame.
pub fn smoothed_variance_series(
    forces: &[[f64; FORCE_AXES]],
    cfg: &VarianceLabelConfig,
) -> Result<Vec<f64>> {
    ema_smooth(&raw_variance_series(forces, cfg)?, cfg.alpha)
}

/// One label per frame. Trailing frames without a full future window reuse
/// the last computable label.
pub fn label_episode(forces: &[[f64; FORCE_AXES]], cfg: &VarianceLabelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let smoothed = smoothed_variance_series(forces, cfg)?;
    let mut labels = smoothed
        .iter()
        .map(|&v| normalize_variance(v, cfg.sigma))
        .collect::<Result<Vec<_>>>()?;
    let last = *labels.last().expect("non-empty");
    labels.resize(forces.len(), last);
    Ok(labels)
}

/// Median of `sqrt(nu_bar)` over frames above `floor`; `None` when no frame
/// qualifies.
pub fn median_sqrt_above(values: impl IntoIterator<Item = f64>, floor: f64) -> Option<f64> {
    let mut v: Vec<f64> = values
        .into_iter()
        .map(f64::sqrt)
        .filter(|s| *s > floor)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}
