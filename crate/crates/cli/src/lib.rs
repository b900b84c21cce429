//! Library surface of the command-line runner, exposed so integration and
//! acceptance tests can drive the exact command implementations.

pub mod commands;
pub mod config;

/// Command-level error with a stable machine-parseable class tag.
#[derive(Debug)]
pub enum CliError {
    Core(gpmil_core::Error),
    Config(String),
    Io(std::io::Error),
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.class(),
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gpmil_core::Error> for CliError {
    fn from(e: gpmil_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}
