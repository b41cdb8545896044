//! Stage orchestration: configuration, stage execution and the job queue.

mod config;
mod jobs;
mod stages;

pub use config::{ConfigError, PipelineConfig, ProviderConfig, KEYS};
pub use jobs::{Job, JobQueue, JobState, JobTarget, StageProgress, LOG_TAIL};
pub use stages::{build_provider, open_store, run_full_auto, run_stage, run_stages, PipelineError, StageOutcome};
