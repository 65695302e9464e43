use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("attention mask leaves no active key ({context})")]
    EmptyMask { context: &'static str },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("tree is invalid: {0}")]
    InvalidTree(String),

    #[error("tree document error at `{path}`: {detail}")]
    TreeSchema { path: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {detail}")]
    TrainingAbort { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for config/usage errors, 3 for
    /// numerical aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument { .. } => 2,
            Error::TrainingAbort { .. } | Error::NonFinite { .. } | Error::NonFiniteGrad { .. } => {
                3
            }
            _ => 1,
        }
    }
}
