use taskvec_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {msg} (offending line: {line:?})")]
    Protocol { msg: String, line: String },
    #[error("incompatible embedding space: {0}")]
    IncompatibleSpace(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("degenerate pool: {0}")]
    DegeneratePool(String),
    #[error("undefined performance rate: {0}")]
    UndefinedRate(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<AutodiffError> for Error {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::Numeric { .. } => Error::Numeric(e.to_string()),
            AutodiffError::Argument(m) => Error::Argument(m),
            AutodiffError::Shape(m) | AutodiffError::Contract(m) => Error::Contract(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
