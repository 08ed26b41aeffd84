use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use tda_core::error::{DataError, DecodeError, MetricError, ModelError, TrainError};

/// Everything a command can fail with. Each variant maps to one exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or missing inputs.
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: already exists (pass --force to overwrite)", .0.display())]
    Exists(PathBuf),
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("training diverged at step {0}; checkpoints written so far are kept")]
    Diverged(u64),
    #[error("{}: checkpoint format version {found}, this build reads version {expected}", path.display())]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{0}")]
    Core(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Exists(_) | CliError::Format { .. } => 3,
            CliError::Diverged(_) => 4,
            CliError::Version { .. } => 5,
            CliError::Core(_) => 1,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Missing required input files are configuration errors.
    pub fn read(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            CliError::Config(format!("{}: file not found", path.display()))
        } else {
            CliError::io(path, source)
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { step } => CliError::Diverged(step),
            TrainError::Config(m) => CliError::Config(m),
            TrainError::ConfigMismatch | TrainError::NoCheckpoints => CliError::Config(e.to_string()),
            other => CliError::Core(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            other => CliError::Core(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        CliError::Core(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Core(e.to_string())
    }
}
