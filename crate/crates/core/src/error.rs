use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DuplexError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DuplexError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("node id {id} out of bounds for graph with {num_nodes} nodes")]
    Bounds { id: usize, num_nodes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch} ({stage})")]
    NonFinite { epoch: usize, stage: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DuplexError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        DuplexError::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DuplexError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DuplexError::Config(msg.into())
    }

    /// True for errors caused by bad user input rather than a runtime fault.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            DuplexError::Config(_) | DuplexError::Parse { .. } | DuplexError::Bounds { .. }
        )
    }
}
