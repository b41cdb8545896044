//! Pipeline stages and progress reporting shared by every stage driver.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generate,
    Download,
    Convert,
    Clean,
    Extract,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Generate, Stage::Download, Stage::Convert, Stage::Clean, Stage::Extract];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Download => "download",
            Stage::Convert => "convert",
            Stage::Clean => "clean",
            Stage::Extract => "extract",
        }
    }

    /// The stage whose output this one consumes.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Generate => None,
            Stage::Download => Some(Stage::Generate),
            Stage::Convert => Some(Stage::Download),
            Stage::Clean => Some(Stage::Convert),
            Stage::Extract => Some(Stage::Clean),
        }
    }

    /// Stages that run after this one.
    pub fn downstream(self) -> impl Iterator<Item = Stage> {
        Stage::ALL.into_iter().filter(move |s| *s > self)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("unknown stage `{0}`")]
pub struct ParseStageError(pub String);

impl FromStr for Stage {
    type Err = ParseStageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| ParseStageError(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StageStatus {
    #[default]
    NotRun,
    Running,
    Done,
    Failed,
}

/// Sink for per-task progress counters and log lines.
pub trait Progress: Sync {
    fn set_total(&self, stage: Stage, total: u64);
    fn advance(&self, stage: Stage, n: u64);
    fn log(&self, line: &str);
}

/// Discards all progress.
pub struct NoProgress;

impl Progress for NoProgress {
    fn set_total(&self, _: Stage, _: u64) {}
    fn advance(&self, _: Stage, _: u64) {}
    fn log(&self, _: &str) {}
}
