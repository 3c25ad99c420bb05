//! Experiment runner: configuration, orchestration and canonical reports.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Overrides};
pub use pipeline::{write_outcome, Flags, Hooks, Outcome};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for everything at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Stage { .. } | Self::Output { .. } => 3,
        }
    }
}
