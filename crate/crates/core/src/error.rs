use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("non-finite gradient in block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("task index {index} out of range for {tasks} tasks")]
    TaskIndex { index: usize, tasks: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite objective")]
    Diverged { epoch: usize, batch: usize },

    #[error("all {} hyperparameter trials failed: {}", .0.len(), .0.join("; "))]
    AllTrialsFailed(Vec<String>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {}: {detail}", file.display())]
    Schema { file: PathBuf, detail: String },

    #[error("malformed model file: {0}")]
    ModelFormat(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
