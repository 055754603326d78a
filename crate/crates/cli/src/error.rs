//! Command failures and their process exit codes.

use std::path::PathBuf;

/// Exit code for a bad flag, config file or argument combination.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for unreadable or inconsistent input data.
pub const EXIT_DATA: i32 = 3;
/// Exit code for a numerical breakdown during computation.
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] stprot::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use stprot::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_DATA,
            CliError::Core(e) => match e {
                E::Config(_) | E::ProteinMissing | E::KTooLarge { .. } | E::NothingToEvaluate => EXIT_USAGE,
                E::RankDeficient
                | E::NonFiniteActivation(_)
                | E::NonFiniteGradient(_)
                | E::AlphaMismatch(_)
                | E::DegenerateCluster { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
