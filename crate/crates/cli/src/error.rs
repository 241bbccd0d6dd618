use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}:{column}: {message}")]
    ConfigParse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] ehresmann_core::Error),
}

impl CliError {
    /// 2 for anything the caller got wrong, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        use ehresmann_core::Error as E;
        match self {
            Self::Core(
                E::InvalidArgument(_)
                | E::InvalidAtlas(_)
                | E::UnknownChart(_)
                | E::MissingTransition { .. }
                | E::StartMismatch { .. }
                | E::NoChartContains(_)
                | E::OutOfDomain(_),
            ) => 2,
            Self::Core(_) => 3,
            _ => 2,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Invalid(format!("csv encoding failed: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
