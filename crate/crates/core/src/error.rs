use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: tensor must be non-empty")]
    EmptyTensor { op: &'static str },

    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range for schedule with {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("cache entry for block {block} read at timestep {t} before it was written")]
    UninitializedCache { t: usize, block: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("model container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
