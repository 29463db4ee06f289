//! Operator front end: configuration, batch pipelines and the
//! length-control proxy.

pub mod commands;
pub mod config;
pub mod proxy;

use std::fmt;

use lenctl_core::controller::ControllerError;

/// Process exit status classes. `0` is success.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage,
    /// Bad configuration or unreadable input files.
    Config,
    Backend,
    /// A session hit the hard cap or the resume limit.
    Limit,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Usage => 2,
            ExitKind::Config => 3,
            ExitKind::Backend => 4,
            ExitKind::Limit => 5,
        }
    }

    pub fn of_controller(e: &ControllerError) -> ExitKind {
        match e {
            _ if e.is_limit() => ExitKind::Limit,
            ControllerError::Config(_) => ExitKind::Config,
            _ => ExitKind::Backend,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(kind: ExitKind, error: impl Into<anyhow::Error>) -> CliError {
        CliError {
            kind,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> CliError {
        CliError::new(ExitKind::Usage, anyhow::anyhow!("{msg}"))
    }

    pub fn config(error: impl Into<anyhow::Error>) -> CliError {
        CliError::new(ExitKind::Config, error)
    }

    pub fn backend(error: impl Into<anyhow::Error>) -> CliError {
        CliError::new(ExitKind::Backend, error)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::config(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
