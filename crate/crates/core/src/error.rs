use lilac_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum LilacError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LilacError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(LilacError::Config(msg.into()))
}
