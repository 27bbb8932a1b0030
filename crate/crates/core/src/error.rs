// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, BridgeError>;

/// Everything that can go wrong while building, training or evaluating a bridge.
#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    /// Operand shapes do not compose.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An op produced NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// Backward was asked to differentiate through an op that has no gradient.
    #[error("no gradient registered for op `{op}`")]
    NoGradient { op: &'static str },

    /// Backward root is not a single scalar.
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// A gradient handed to the optimiser contains NaN or infinity.
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    /// Loss became non-finite during training.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Vector dimension disagrees with what the consumer expects.
    #[error("dimension mismatch: {context} expects {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    /// Cosine similarity or normalisation of a zero vector.
    #[error("zero-norm vector {context}")]
    ZeroNorm { context: String },

    /// A configuration value violates its invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data violates a precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A binary file does not follow its declared layout.
    #[error("malformed {kind} file at byte offset {offset}: {detail}")]
    Format {
        kind: &'static str,
        offset: u64,
        detail: String,
    },

    /// A binary file was written by an incompatible format version.
    #[error("incompatible {kind} format version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BridgeError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        BridgeError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BridgeError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (non-finite values) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            BridgeError::NonFinite { .. }
                | BridgeError::NonFiniteGradient { .. }
                | BridgeError::NonFiniteLoss { .. }
        )
    }
}
