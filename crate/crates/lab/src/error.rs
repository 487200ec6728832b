use std::path::PathBuf;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{0}")]
    Usage(String),
    #[error("line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] t1t2_core::Error),
    #[error("oracle check failed: {0}")]
    Oracle(String),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage/config/IO, 2 numeric failure, 3 oracle failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Core(e) if e.is_numeric() => 2,
            LabError::Oracle(_) => 3,
            _ => 1,
        }
    }
}
