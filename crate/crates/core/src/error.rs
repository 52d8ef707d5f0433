use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("integer overflow detected: {0}")]
    OverflowDetected(String),

    #[error("collective aborted: {0}")]
    AbortedCollective(String),

    #[error("configuration refused: {0}")]
    RefusedConfiguration(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("relative error undefined: the mean vector is zero")]
    UndefinedRelativeError,

    #[error("iterate diverged at step {step} (norm {norm:e})")]
    Diverged { step: usize, norm: f64 },

    #[error("config parse error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid_arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptPayload(msg.into())
    }
}
