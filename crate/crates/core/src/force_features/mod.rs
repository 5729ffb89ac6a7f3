//! Force windows, the causal dilated TCN tokenizer, and variance labels.

mod labels;
mod tcn;

pub use labels::{
    ema_smooth, label_episode, median_sqrt_above, normalize_variance, raw_variance,
    raw_variance_series, smoothed_variance_series, VarianceLabelConfig, LABEL_MAX,
};
pub use tcn::{downsample_indices, tcn_encode, ForceTokens, TcnConfig, TcnCtx, TcnEncoder};

use crate::error::{Error, Result};

pub const FORCE_AXES: usize = 6;

/// One 6-axis force/torque reading: `(fx, fy, fz, mx, my, mz)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceSample {
    pub t: f64,
    pub f: [f64; FORCE_AXES],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// Low-rate stream aligned with vision frames.
    History,
    /// Freshest samples of the high-rate stream.
    Latest,
}

/// `tau` consecutive force readings, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceWindow {
    kind: WindowKind,
    samples: Vec<ForceSample>,
}

impl ForceWindow {
    pub fn new(kind: WindowKind, samples: Vec<ForceSample>, tau: usize) -> Result<Self> {
        if samples.len() != tau {
            return Err(Error::shape(
                "force window",
                format!("{tau} rows"),
                samples.len(),
            ));
        }
        if samples.iter().any(|s| !s.t.is_finite() || s.f.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("force window".into()));
        }
        if samples.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::Invalid("force window timestamps decrease".into()));
        }
        Ok(ForceWindow { kind, samples })
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn samples(&self) -> &[ForceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn latest_time(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64; FORCE_AXES]> {
        self.samples.iter().map(|s| &s.f)
    }
}
