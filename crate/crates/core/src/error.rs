use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the compensation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("image is constant; no threshold separates two classes")]
    ConstantImage,
    #[error("mask is empty")]
    EmptyMask,
    #[error("degenerate rectangle ({0}x{1})")]
    DegenerateRect(usize, usize),
    #[error("fixed-point inversion did not converge at projector pixel ({row}, {col})")]
    NonConvergence { row: usize, col: usize },
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error("non-deterministic function: evaluations differ by {0:e}")]
    NonDeterministic(f64),
    #[error("structured-light decode produced no valid pixels")]
    AllInvalidDecode,
    #[error("degenerate color sample spread: {0}")]
    DegenerateSamples(String),
    #[error("insufficient source images: need {needed}, have {available}")]
    InsufficientSources { needed: usize, available: usize },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
