use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dialogue {id}: {reason}")]
    InvalidDialogue { id: String, reason: String },

    #[error("duplicate dialogue id {0}")]
    DuplicateId(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty replacement pool for dialogue {0}")]
    EmptyPool(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: &'static str },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than by the program.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Diverged { .. })
    }
}
