use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the grasp-learning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("orientation quaternion is not normalized (norm = {0})")]
    NonUnitQuaternion(f64),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("demonstration target unreachable for the {finger} finger: {reason}")]
    Unreachable { finger: &'static str, reason: String },

    #[error("numerical fault: {0}")]
    Fault(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss {
        iteration: usize,
        detail: String,
        dump: Option<PathBuf>,
    },

    #[error("failed to parse {what}: {msg}")]
    Format { what: String, msg: String },

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(what: impl Into<String>, msg: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            msg: msg.to_string(),
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::NonUnitQuaternion(_) => "non_unit_quaternion",
            Error::Dimension { .. } => "dimension_mismatch",
            Error::Unreachable { .. } => "unreachable_target",
            Error::Fault(_) => "numerical_fault",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Format { .. } => "format",
            Error::Load(_) => "load",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
