pub mod error;
pub mod fast_expert;
pub mod force_features;
pub mod io;
pub mod model;
pub mod numerics;
pub mod runtime;
pub mod simsuite;
pub mod slow_context;
pub mod training;

pub use error::{Error, Result};
pub use io::config::RunConfig;
pub use model::{ModelConfig, Policy};
pub use runtime::{EpisodeResult, ScheduleConfig, ScheduleMode};
pub use simsuite::{Env, TaskKind, TaskSpec};
