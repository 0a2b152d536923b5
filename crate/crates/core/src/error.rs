use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// The projective denominator vanished while mapping an output pixel.
    #[error("degenerate warp at sample {sample}, pixel (row {row}, col {col}): |w| = {w:e}")]
    DegenerateWarp {
        sample: usize,
        row: usize,
        col: usize,
        w: f64,
    },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("structure error: {0}")]
    Structure(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("training diverged at iteration {iteration} (loss {loss}); diagnostic checkpoint: {checkpoint:?}")]
    Divergence {
        iteration: u64,
        loss: f64,
        checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
