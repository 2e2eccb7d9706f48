//! Command-line plumbing for the hyperfc pipeline: strict JSON configs with
//! flag overrides, reproducibility headers embedded in every report, and a
//! stable exit-code contract.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure (training divergence, failed gradient check).

pub mod commands;
pub mod config;
pub mod report;

use std::fmt;

/// Errors surfaced by the binary, partitioned by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage or configuration: exit 1.
    Config(String),
    /// Numerical failure such as a gradient check above tolerance: exit 3.
    Numerical(String),
    /// Library error; the exit code depends on the variant.
    Core(hyperfc::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            CliError::Core(err) => write!(f, "{err}"),
        }
    }
}

impl From<hyperfc::Error> for CliError {
    fn from(err: hyperfc::Error) -> Self {
        CliError::Core(err)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Map an error to the documented exit code: configuration and invalid
/// parameter values are 1, data/format/protocol problems are 2, numerical
/// failures are 3.
pub fn exit_code(err: &CliError) -> i32 {
    use hyperfc::Error;
    match err {
        CliError::Config(_) => 1,
        CliError::Numerical(_) => 3,
        CliError::Core(core) => match core {
            Error::Parameter(_) => 1,
            Error::Training { .. } | Error::Oracle(_) => 3,
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::Validation(_)
            | Error::DegenerateSignal { .. }
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Protocol(_) => 2,
        },
    }
}
