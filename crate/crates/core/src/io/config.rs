use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fast_expert::FastModelConfig;
use crate::model::ModelConfig;
use crate::runtime::ScheduleConfig;
use crate::simsuite::{TaskKind, TaskParams, TaskSpec};
use crate::slow_context::SlowModelConfig;
use crate::training::{LabelingConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasksConfig {
    pub peg: TaskParams,
    pub wipe: TaskParams,
}

/// Top-level JSON configuration shared by every command. Every section is
/// optional and falls back to defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tasks: TasksConfig,
    pub slow_model: SlowModelConfig,
    pub fast_model: FastModelConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainConfig,
    pub labeling: LabelingConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for kind in TaskKind::ALL {
            self.task_spec(kind)?;
        }
        let model = self.model();
        model.slow.validate()?;
        model.fast.validate()?;
        self.schedule.validate(model.fast.horizon)?;
        self.training.validate()?;
        self.labeling.validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            slow: self.slow_model.clone(),
            fast: self.fast_model.clone(),
        }
    }

    pub fn task_spec(&self, kind: TaskKind) -> Result<TaskSpec> {
        let params = match kind {
            TaskKind::Peg => self.tasks.peg.clone(),
            TaskKind::Wipe => self.tasks.wipe.clone(),
        };
        TaskSpec::new(kind, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_depth() {
        assert!(RunConfig::from_json(r#"{"sead": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"training": {"lamda": 0.1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tasks": {"peg": {"contact": {"stifness": 1}}}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"training": {"lambda": -1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schedule": {"n_max": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"training": {"iterations": 0}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.training.lambda = 0.0;
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
