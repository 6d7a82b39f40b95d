use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error(
        "{size}x{size} matrix is not positive definite even with diagonal jitter {max_jitter:e}"
    )]
    NotPositiveDefinite { size: usize, max_jitter: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("noise variance update underflowed to zero")]
    NoiseVarianceUnderflow,

    #[error("every learning-rate candidate failed: {0}")]
    AllCandidatesFailed(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
