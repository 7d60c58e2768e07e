use std::path::PathBuf;

use pbam::trace::RunTrace;
use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The run stopped on a numeric breakdown. `trace` holds every record
    /// written before the abort.
    #[error("numeric abort after {} records: {source}", trace.len())]
    Numeric {
        #[source]
        source: pbam::Error,
        trace: Box<RunTrace>,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Numeric { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Sorts a library error into config or numeric, attaching `trace` to
    /// numeric ones.
    pub(crate) fn from_core(err: pbam::Error, trace: &RunTrace) -> Self {
        if err.is_numeric() {
            HarnessError::Numeric {
                source: err,
                trace: Box::new(trace.clone()),
            }
        } else {
            HarnessError::Config(err.to_string())
        }
    }
}
