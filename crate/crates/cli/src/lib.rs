//! Command implementations behind the `omnienc` binary.
//!
//! Every command turns a [`RunConfig`] into an [`Output`]: a deterministic
//! report for stdout, optional diagnostics for stderr, and an exit code.

pub mod commands;
pub mod report;
pub mod runconfig;

use thiserror::Error;

pub use report::Report;
pub use runconfig::RunConfig;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for a failed check or a training fault.
pub const EXIT_FAILURE: i32 = 1;
/// Exit code for configuration and I/O errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] omnienc::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Core(omnienc::Error::Training { .. }) => EXIT_FAILURE,
            Failure::Core(_) => EXIT_USAGE,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

/// What a command hands back to `main`.
#[derive(Debug, Default)]
pub struct Output {
    pub stdout: String,
    pub stderr: String,
    pub code: i32,
}

impl Output {
    pub fn ok(report: Report) -> Self {
        Self {
            stdout: report.finish(),
            ..Default::default()
        }
    }
}
