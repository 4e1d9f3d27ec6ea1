use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("val_fraction {val_fraction} leaves an empty {which} split for a corpus of {len} characters")]
    EmptySplit {
        which: &'static str,
        val_fraction: f64,
        len: usize,
    },

    #[error("{len} training tokens cannot give {n_clients} clients at least {min_len} tokens each")]
    TooFewTokens {
        len: usize,
        n_clients: usize,
        min_len: usize,
    },

    #[error("sequence of length {len} is shorter than one window of {needed} tokens")]
    ShortSequence { len: usize, needed: usize },

    #[error("unfrozen layer count k={k} outside 1..={n_blocks}")]
    InvalidDepth { k: usize, n_blocks: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value after {0}")]
    NonFinite(&'static str),

    #[error("invalid compression level {0}")]
    InvalidLevel(u8),

    #[error("corrupt wire payload: expected {expected} bytes, got {actual}")]
    CorruptPayload { expected: usize, actual: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("metrics file {path}: {message}")]
    Metrics { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from user input (config or corpus choice)
    /// rather than from running the simulation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::EmptyCorpus
                | Error::EmptySplit { .. }
                | Error::TooFewTokens { .. }
                | Error::ShortSequence { .. }
        )
    }
}
