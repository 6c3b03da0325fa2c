use kgd_core::KgdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Core(#[from] KgdError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl RunnerError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 2,
            RunnerError::Core(KgdError::Numeric(_)) => 3,
            RunnerError::Core(KgdError::InvalidArgument(_) | KgdError::Config(_)) => 2,
            _ => 1,
        }
    }
}
