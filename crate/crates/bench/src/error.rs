use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Module(#[from] potbench_core::Error),

    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl BenchError {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        BenchError::Config { key: key.into(), reason: reason.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        BenchError::Io { path: path.to_path_buf(), source }
    }

    /// 1 for module failures, 2 for config problems, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Module(_) => 1,
            BenchError::Config { .. } => 2,
            BenchError::Io { .. } => 3,
        }
    }
}
