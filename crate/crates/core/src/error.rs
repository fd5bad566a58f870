// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Errors produced by kernels, model loading, analysis and experiments.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A kernel produced (or was fed) NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Softmax over a row whose entries are all negative infinity.
    #[error("softmax row {0} has no finite entries")]
    EmptySoftmaxRow(usize),

    /// A weight file is missing a tensor that the architecture requires.
    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    /// The weight, corpus, vocabulary or fixture file could not be parsed.
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    /// Invalid configuration or inconsistent hyperparameters.
    #[error("invalid config: {0}")]
    Config(String),

    /// Token id outside the vocabulary or sequence longer than the context.
    #[error("invalid tokens: {0}")]
    Tokens(String),

    /// Component, checkpoint or head that does not exist for this model.
    #[error("invalid component: {0}")]
    InvalidComponent(String),

    /// Reference vector whose squared norm is below the exclusion threshold.
    #[error("degenerate reference vector (squared norm {0:e})")]
    DegenerateReference(f64),

    /// Statistics requested on data with no variance or too few points.
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// An intervention plan that cannot be applied.
    #[error("invalid intervention: {0}")]
    Intervention(String),

    /// A runtime consistency check failed.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
