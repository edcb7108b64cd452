//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// configuration (2), data (3), numerical (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("k out of range: k={k}, database size={db_size}")]
    KOutOfRange { k: usize, db_size: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("undefined ADP metric: zero-norm profile at BS {bs}{}",
            pair.map(|(i, j)| format!(" (sample pair {i}, {j})")).unwrap_or_default())]
    UndefinedMetric { bs: usize, pair: Option<(usize, usize)> },

    #[error("neighborhood graph is disconnected; component sizes: {0:?}")]
    DisconnectedGraph(Vec<usize>),

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit-code class for CLI reporting: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ShapeMismatch { .. } | Error::KOutOfRange { .. } => 2,
            Error::DegenerateGeometry(_)
            | Error::UndefinedMetric { .. }
            | Error::DisconnectedGraph(_)
            | Error::Format(_)
            | Error::Io(_) => 3,
            Error::NonFinite(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
