use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{message}")]
    Divergence { message: String, diagnostic: Value },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Internal(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            Self::Divergence { .. } => 3,
            Self::Io { .. } => 4,
            Self::Internal(_) => 1,
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    /// Maps a csv error onto I/O or validation depending on its cause.
    pub fn csv(path: impl AsRef<Path>, err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line());
        match err.into_kind() {
            csv::ErrorKind::Io(source) => Self::io(path, source),
            other => {
                let at = line.map(|l| format!(" (line {l})")).unwrap_or_default();
                Self::Validation(format!("{}{at}: {other:?}", path.as_ref().display()))
            }
        }
    }
}

impl From<modal_core::Error> for CliError {
    fn from(err: modal_core::Error) -> Self {
        use modal_core::Error as E;
        let message = err.to_string();
        match err {
            E::Validation(_) | E::Domain(_) | E::DegenerateSignal(_) => Self::Validation(message),
            E::Divergence { step, node, reason } => Self::Divergence {
                diagnostic: json!({
                    "error": "divergence",
                    "step": step,
                    "node": node,
                    "reason": reason,
                }),
                message,
            },
            E::NonConvergence { iterations, last } => Self::Divergence {
                diagnostic: json!({
                    "error": "non_convergence",
                    "iterations": iterations,
                    "last": last,
                }),
                message,
            },
            E::Internal(_) => Self::Internal(message),
        }
    }
}
