use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed wav: {0}")]
    WavFormat(String),

    #[error("unsupported wav encoding: {0}")]
    UnsupportedWav(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing dependency: run stage `{0}` first")]
    Dependency(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {snapshot}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        snapshot: String,
    },
}

impl Error {
    /// CLI exit code for this error class: 2 config, 3 dependency, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Parse { .. } | Error::Shape(_) => 2,
            Error::Dependency(_) => 3,
            _ => 4,
        }
    }
}
