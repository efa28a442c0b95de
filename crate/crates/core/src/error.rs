use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input")]
    EmptyInput,
    #[error("malformed data: {0}")]
    Format(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("non-finite value at step {step}: {detail}")]
    Numeric { step: u64, detail: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Coarse error classes surfaced as process exit codes by the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    State,
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::State(_) => ErrorCategory::State,
            Error::Numeric { .. } => ErrorCategory::Numeric,
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::EmptyInput
            | Error::Format(_)
            | Error::Data(_)
            | Error::Degenerate(_) => ErrorCategory::Data,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            found,
        }
    }
}
