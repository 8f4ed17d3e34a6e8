//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes incompatible for an operation.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: String, detail: String },

    /// An operation produced a non-finite value.
    #[error("non-finite value produced by `{op}`")]
    NumericOverflow { op: String },

    /// A tensor handle was used with a graph it does not belong to.
    #[error("tensor belongs to a different graph (expected graph {expected}, got {actual})")]
    GraphMismatch { expected: u64, actual: u64 },

    /// `backward` was called a second time on the same graph.
    #[error("backward already ran on this graph; build a fresh graph to differentiate again")]
    BackwardAlreadyRun,

    /// `backward` requires a scalar loss.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// The loss builder passed to the gradient checker is not deterministic.
    #[error("loss builder is not deterministic: two forward evaluations differ ({first} vs {second})")]
    NondeterministicBuilder { first: f64, second: f64 },

    /// Invalid finite-difference step.
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),

    /// Invalid argument outside the more specific categories.
    #[error("{0}")]
    Invalid(String),

    /// Gradient or parameter became non-finite during optimization.
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },

    /// Data file parse failure.
    #[error("parse error in {path} at line {line}, column {column}: {detail}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        detail: String,
    },

    /// Dataset-level validation failure.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Configuration file or flag problem.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training runtime failure with context.
    #[error("training failed at epoch {epoch}, batch {batch}: {detail}")]
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code classification for the CLI: configuration/input problems
    /// exit with 2, runtime failures with 1.
    pub fn is_usage_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::Checkpoint(_)
                | Error::Dataset(_)
                | Error::Invalid(_)
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
