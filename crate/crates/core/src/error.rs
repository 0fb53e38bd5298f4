use thiserror::Error;

use crate::estimator::WaveEstimate;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid sampling: {0}")]
    InvalidSampling(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{modes} phase modes alias on a ring of {samples} samples")]
    Aliasing { modes: usize, samples: usize },

    #[error("diagram has no peak (all bins are zero)")]
    NoPeak,

    #[error("wave signature has zero energy")]
    Degenerate,

    #[error("estimation stopped after {} wave(s): {source}", completed.len())]
    Partial {
        completed: Vec<WaveEstimate>,
        source: Box<Error>,
    },

    #[error("tensor cache: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
