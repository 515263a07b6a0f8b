use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("unsupported primitive: {0}")]
    Capability(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no embedding for text {0:?}")]
    Lookup(String),

    #[error("embedding table load error: {0}")]
    TableLoad(String),

    #[error("expert gate failed for tasks {failing:?}")]
    ExpertGate { failing: Vec<(u32, f64)> },

    #[error("task {task_id} requires a prompt trajectory at evaluation time, none was provided")]
    MissingPrompt { task_id: u32 },

    #[error("training diverged at step {step}: {diagnostic}")]
    NanAbort {
        step: u64,
        diagnostic: String,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },

    #[error("artifact format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact {path}; produce it with `{producer}`")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Shape {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status used by the command-line tool: 2 for invalid
    /// configuration or input, 3 for a diverged run, 4 for a missing
    /// artifact, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Input(_)
            | Error::Incompatible(_)
            | Error::Exists(_)
            | Error::Lookup(_)
            | Error::TableLoad(_)
            | Error::MissingPrompt { .. } => 2,
            Error::NanAbort { .. } => 3,
            Error::MissingArtifact { .. } => 4,
            _ => 1,
        }
    }
}
