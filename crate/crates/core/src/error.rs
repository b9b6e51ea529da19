use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("validation failed for {what}: {reason}")]
    Validation { what: String, reason: String },

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("unknown instruction `{0}`")]
    UnknownInstruction(String),

    #[error("invalid edit request: {0}")]
    InvalidRequest(String),

    #[error("editor failed ({context}): {source}")]
    EditorFailed {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("no source covers any pixel of view {view} at t={time}")]
    ZeroCoverage { view: usize, time: usize },

    #[error("fit diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("editor call budget exceeded: {calls} > {bound}")]
    BudgetExceeded { calls: usize, bound: usize },

    #[error("worker failure: {0}")]
    Worker(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::Validation { .. }
                | Error::Parse { .. }
                | Error::UnknownInstruction(_)
                | Error::Config(_)
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Validation { .. } => "validation",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Domain(_) => "domain",
            Error::OutOfRange(_) => "out_of_range",
            Error::UnknownInstruction(_) => "unknown_instruction",
            Error::InvalidRequest(_) => "invalid_request",
            Error::EditorFailed { .. } => "editor_failed",
            Error::ZeroCoverage { .. } => "zero_coverage",
            Error::Divergence { .. } => "divergence",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::Worker(_) => "worker",
            Error::Config(_) => "config",
        }
    }
}

/// Converts a serde_json error's line/column into a byte offset within `text`.
pub(crate) fn json_error(path: impl Into<PathBuf>, text: &str, err: &serde_json::Error) -> Error {
    let offset = if err.line() == 0 {
        text.len()
    } else {
        let line_start: usize = text
            .split_inclusive('\n')
            .take(err.line() - 1)
            .map(str::len)
            .sum();
        (line_start + err.column().saturating_sub(1)).min(text.len())
    };
    Error::Parse {
        path: path.into(),
        offset,
        msg: err.to_string(),
    }
}
