use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI file: {0}")]
    Format(String),

    #[error("unsupported NIfTI feature: {0}")]
    Unsupported(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("class {0} has zero prior mass")]
    DegeneratePrior(&'static str),

    #[error("mixture fit failed: {0}")]
    Fit(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("mask is degenerate: {0}")]
    DegenerateMask(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("invalid phantom specification: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing output of stage `{stage}`: {path}")]
    MissingStage { stage: String, path: PathBuf },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
