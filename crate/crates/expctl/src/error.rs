use lilac_core::LilacError;

#[derive(Debug, thiserror::Error)]
pub enum CtlError {
    #[error("config error: {0}")]
    Config(String),
    #[error("refusing to write: {0}")]
    Refused(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CtlError {
    /// 2 for problems the invocation can fix, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CtlError::Config(_) | CtlError::Refused(_) => 2,
            CtlError::Runtime(_) => 3,
        }
    }
}

impl From<LilacError> for CtlError {
    fn from(e: LilacError) -> Self {
        match e {
            LilacError::Config(m) => CtlError::Config(m),
            other => CtlError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CtlError {
    fn from(e: std::io::Error) -> Self {
        CtlError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CtlError {
    fn from(e: serde_json::Error) -> Self {
        CtlError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CtlError>;
