use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("rotation angle {angle:.9} rad is too close to pi for a unique logarithm")]
    BranchAmbiguity { angle: f64 },

    #[error("blend is degenerate: blended real part has norm {norm:e}")]
    DegenerateBlend { norm: f64 },

    #[error("invalid blend weights: {0}")]
    InvalidWeights(String),

    #[error("invalid depth {depth} at frame {frame}")]
    InvalidDepth { frame: usize, depth: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("unsupported scene description: {0}")]
    SceneSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("image size mismatch: {left:?} vs {right:?}")]
    SizeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite gradient for primitives {ids:?}")]
    NonFiniteGradient { ids: Vec<u64> },

    #[error("optimization diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("image error for {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("i/o error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
