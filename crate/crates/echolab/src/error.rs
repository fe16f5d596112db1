use thiserror::Error;

/// Library-level error type for fallible, user-facing operations.
///
/// Internal shape violations on the compute tape are programming errors and
/// panic with a message naming the op and the offending shapes instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("container format error: {0}")]
    Container(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("parameter shape mismatch for `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("training diverged at update {update}: {what}")]
    Diverged { update: usize, what: String },
    #[error("compute budget mismatch: {0}")]
    BudgetMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
