//! Tool error kinds and their process exit codes.

use std::fmt;

use fusekit_core::baselines::BaselineError;
use fusekit_core::checkpoint::CheckpointError;
use fusekit_core::diagnostics::DiagnosticsError;
use fusekit_core::fusion::FusionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, recipe, or hyperparameters → exit 2.
    Config,
    /// Missing/unreadable/unwritable or malformed files → exit 3.
    Io,
    /// Shape mismatch under the strict policy → exit 4.
    Shape,
    /// Anything else → exit 1.
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Io => 3,
            ErrorKind::Shape => 4,
            ErrorKind::Internal => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Io => "io",
            ErrorKind::Shape => "shape",
            ErrorKind::Internal => "internal",
        }
    }
}

#[derive(Debug)]
pub struct ToolError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ToolError {
    pub fn config(msg: impl Into<String>) -> Self {
        ToolError {
            kind: ErrorKind::Config,
            message: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        ToolError {
            kind: ErrorKind::Io,
            message: msg.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        ToolError {
            kind: ErrorKind::Shape,
            message: msg.into(),
        }
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        ToolError {
            kind: ErrorKind::Internal,
            message: msg.into(),
        }
    }

    /// Single-line machine-parsable form: `fusekit: error[kind]: message`.
    pub fn render(&self) -> String {
        let flat = self.message.replace('\n', " ");
        format!("fusekit: error[{}]: {}", self.kind.as_str(), flat)
    }
}

impl fmt::Display for ToolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::error::Error for ToolError {}

pub type ToolResult<T> = Result<T, ToolError>;

impl From<CheckpointError> for ToolError {
    fn from(e: CheckpointError) -> Self {
        ToolError::io(e.to_string())
    }
}

impl From<FusionError> for ToolError {
    fn from(e: FusionError) -> Self {
        match e {
            // unmatched tensors under the strict policy are checkpoint
            // compatibility failures, same exit class as shape mismatch
            FusionError::ShapeMismatch { .. } | FusionError::UnmatchedSecondary(_) => {
                ToolError::shape(e.to_string())
            }
            FusionError::InvalidConfig(_) | FusionError::EmptyIntersection => {
                ToolError::config(e.to_string())
            }
            FusionError::Checkpoint(inner) => inner.into(),
            other => ToolError::internal(other.to_string()),
        }
    }
}

impl From<BaselineError> for ToolError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::ShapeMismatch(..) => ToolError::shape(e.to_string()),
            BaselineError::InvalidConfig(_) => ToolError::config(e.to_string()),
            BaselineError::NoDeltas => ToolError::config(e.to_string()),
        }
    }
}

impl From<DiagnosticsError> for ToolError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::ShapeMismatch(..) => ToolError::shape(e.to_string()),
            DiagnosticsError::EmptySelection(_) => ToolError::config(e.to_string()),
            other => ToolError::internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ToolError {
    fn from(e: std::io::Error) -> Self {
        ToolError::io(e.to_string())
    }
}
