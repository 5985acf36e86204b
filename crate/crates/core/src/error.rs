// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// All failures surfaced by the probing engine.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum ProbeError {
    /// Two operands disagree on a dimension.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An input contained NaN or an infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An input sequence or set was empty where at least one item is required.
    #[error("empty input: {0}")]
    Empty(String),

    /// An attention mask violated its invariants or does not fit the sequence.
    #[error("invalid mask: {0}")]
    Mask(String),

    /// A value was outside its permitted range.
    #[error("out of range: {0}")]
    Range(String),

    /// A label was not present in an alias table or candidate set.
    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    /// An alias table or lexicon was malformed.
    #[error("invalid table: {0}")]
    Table(String),

    /// An intervention plan does not fit the model it is applied to.
    #[error("invalid plan: {0}")]
    Plan(String),

    /// Interchange manifest or tensor problem.
    #[error("interchange error in {path}: {reason}")]
    Interchange {
        /// File or directory concerned.
        path: PathBuf,
        /// What was wrong.
        reason: String,
    },

    /// A required asset is absent from a dump.
    #[error("missing asset `{0}`")]
    MissingAsset(String),

    /// Configuration problem.
    #[error("config error: {0}")]
    Config(String),

    /// I/O failure with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        /// File concerned.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// JSON parse or serialization failure.
    #[error("json error in {context}: {source}")]
    Json {
        /// File or record concerned.
        context: String,
        /// Underlying error.
        #[source]
        source: serde_json::Error,
    },
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, ProbeError>;

impl ProbeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Self::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn interchange(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Interchange {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
