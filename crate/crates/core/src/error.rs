use thiserror::Error;

#[derive(Debug, Error)]
pub enum HamError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("state error: {0}")]
    State(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HamError {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            HamError::Config(_) => 2,
            HamError::Training(_) | HamError::Degenerate(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HamError>;
