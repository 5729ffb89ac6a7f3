//! Evaluation reports, per-episode traces and their summaries. Every number
//! in a report can be recomputed from the trace files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::force_features::{label_episode, VarianceLabelConfig, FORCE_AXES};
use crate::runtime::{EpisodeResult, ScheduleMode};
use crate::simsuite::{force_norm, TaskKind};

pub const TRACE_FORMAT: &str = "favla-trace-v1";
pub const REPORT_FORMAT: &str = "favla-eval-v1";

/// One evaluated episode with the settings needed to interpret it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeTrace {
    pub format: String,
    pub task: TaskKind,
    pub mode: ScheduleMode,
    pub n_max: usize,
    /// Label settings of the training data, when the checkpoint carries them.
    pub label: Option<VarianceLabelConfig>,
    pub episode: EpisodeResult,
}

impl EpisodeTrace {
    pub fn new(
        task: TaskKind,
        mode: ScheduleMode,
        n_max: usize,
        label: Option<VarianceLabelConfig>,
        episode: EpisodeResult,
    ) -> Self {
        EpisodeTrace {
            format: TRACE_FORMAT.into(),
            task,
            mode,
            n_max,
            label,
            episode,
        }
    }

    /// Per-step force norms over the whole episode.
    pub fn force_norms(&self) -> Vec<f64> {
        self.episode.step_forces().map(force_norm).collect()
    }

    /// Variance labels recomputed from the traced step forces; `None` without
    /// a label config or when the episode is shorter than the label window.
    pub fn labels(&self) -> Option<Vec<f64>> {
        let cfg = self.label.as_ref()?;
        let forces: Vec<[f64; FORCE_AXES]> = self.episode.step_forces().copied().collect();
        label_episode(&forces, cfg).ok()
    }
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<EpisodeTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let t: EpisodeTrace =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if t.format != TRACE_FORMAT {
        return Err(Error::format(path, format!("unsupported format '{}'", t.format)));
    }
    Ok(t)
}

/// All `trace_*.json` files under `dir`, recursively, sorted by path.
pub fn find_traces(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trace_") && n.ends_with(".json"))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Aggregate over the episodes of one (task, mode) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSummary {
    pub task: TaskKind,
    pub mode: ScheduleMode,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_peak_force: f64,
    pub mean_ae_calls: f64,
    pub mean_steps: f64,
    pub seeds: Vec<u64>,
}

impl ModeSummary {
    pub fn from_results(task: TaskKind, mode: ScheduleMode, results: &[EpisodeResult]) -> Self {
        let n = results.len();
        let mean = |f: &dyn Fn(&EpisodeResult) -> f64| {
            if n == 0 {
                0.0
            } else {
                results.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let successes = results.iter().filter(|r| r.success).count();
        ModeSummary {
            task,
            mode,
            episodes: n,
            successes,
            success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            mean_peak_force: mean(&|r| r.peak_force),
            mean_ae_calls: mean(&|r| r.ae_calls as f64),
            mean_steps: mean(&|r| r.steps as f64),
            seeds: results.iter().map(|r| r.seed).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub format: String,
    pub checkpoint: String,
    pub task: TaskKind,
    pub seed: u64,
    pub rows: Vec<ModeSummary>,
}

impl EvalReport {
    pub fn new(checkpoint: String, task: TaskKind, seed: u64, rows: Vec<ModeSummary>) -> Self {
        EvalReport {
            format: REPORT_FORMAT.into(),
            checkpoint,
            task,
            seed,
            rows,
        }
    }

    pub fn row(&self, mode: ScheduleMode) -> Option<&ModeSummary> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

pub const ABLATION_HEADER: &str =
    "task,mode,episodes,successes,success_rate,mean_peak_force,mean_ae_calls,mean_steps";

pub fn ablation_csv(rows: &[ModeSummary]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.task,
            r.mode,
            r.episodes,
            r.successes,
            r.success_rate,
            r.mean_peak_force,
            r.mean_ae_calls,
            r.mean_steps
        ));
    }
    s
}

/// Scheduled rates before the first contact of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactAnticipation {
    pub seed: u64,
    /// Cycle containing the first contact step.
    pub contact_cycle: Option<usize>,
    /// Mean `n_t` over the first (up to 5) cycles that end before contact.
    pub early_mean_n: Option<f64>,
    /// Mean `n_t` over the (up to 10) cycles that start before contact,
    /// including the contact cycle itself.
    pub pre_contact_mean_n: Option<f64>,
    pub anticipates: bool,
}

pub fn contact_anticipation(ep: &EpisodeResult) -> ContactAnticipation {
    let contact_cycle = ep.first_contact_step.map(|step| {
        let mut seen = 0;
        ep.cycles
            .iter()
            .position(|c| {
                seen += c.steps.len();
                seen > step
            })
            .unwrap_or(ep.cycles.len().saturating_sub(1))
    });
    let mean = |cs: &[crate::runtime::CycleTrace]| {
        (!cs.is_empty()).then(|| cs.iter().map(|c| c.n_t as f64).sum::<f64>() / cs.len() as f64)
    };
    let (early, pre) = match contact_cycle {
        Some(c) => (
            mean(&ep.cycles[..c.min(5)]),
            mean(&ep.cycles[c.saturating_sub(9)..=c]),
        ),
        None => (None, None),
    };
    ContactAnticipation {
        seed: ep.seed,
        contact_cycle,
        early_mean_n: early,
        pre_contact_mean_n: pre,
        anticipates: matches!((early, pre), (Some(e), Some(p)) if p > e),
    }
}

pub const ANTICIPATION_HEADER: &str = "seed,mode,contact_cycle,early_mean_n,pre_contact_mean_n,anticipates";

pub fn anticipation_csv(traces: &[EpisodeTrace]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut s = String::from(ANTICIPATION_HEADER);
    s.push('\n');
    for t in traces {
        let a = contact_anticipation(&t.episode);
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            a.seed,
            t.mode,
            a.contact_cycle.map_or(String::new(), |c| c.to_string()),
            opt(a.early_mean_n),
            opt(a.pre_contact_mean_n),
            a.anticipates
        ));
    }
    s
}
