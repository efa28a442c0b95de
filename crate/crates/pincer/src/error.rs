use std::path::{Path, PathBuf};

use pincer_core::ErrorCategory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pincer_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A core error raised while reading or writing `path`.
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        source: pincer_core::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Core(e) | Error::InFile { source: e, .. } => e.category(),
            Error::Io { .. } => ErrorCategory::Data,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        exit_code(self.category())
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn at(path: &Path, source: pincer_core::Error) -> Self {
        Error::InFile {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Core(pincer_core::Error::Config(msg.into()))
    }
}

/// Stable exit codes: 2 config, 3 data, 4 state, 5 numeric.
pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::State => 4,
        ErrorCategory::Numeric => 5,
    }
}

/// Attaches a path to core errors.
pub(crate) trait Context<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> Context<T> for pincer_core::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| Error::at(path, e))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
