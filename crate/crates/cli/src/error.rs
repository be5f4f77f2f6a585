//! Error classes and their process exit codes.

use usg_core::{DatasetError, GuidanceError, ModelError, PhantomError};

/// Exit codes, one per error class. Clap itself exits with 2 on bad flags.
pub mod code {
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const FORMAT: i32 = 4;
    pub const DIVERGED: i32 = 5;
    pub const BALANCING: i32 = 6;
    pub const INFEASIBLE: i32 = 7;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Balancing(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => code::USAGE,
            CliError::Io(_) => code::IO,
            CliError::Format(_) => code::FORMAT,
            CliError::Diverged(_) => code::DIVERGED,
            CliError::Balancing(_) => code::BALANCING,
            CliError::Infeasible(_) => code::INFEASIBLE,
            CliError::Other(_) => code::OTHER,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let msg = e.to_string();
        match e {
            DatasetError::Io { .. } => CliError::Io(msg),
            DatasetError::BadMagic
            | DatasetError::Version { .. }
            | DatasetError::Truncated(_)
            | DatasetError::Checksum { .. }
            | DatasetError::Format(_)
            | DatasetError::LabelMismatch { .. } => CliError::Format(msg),
            DatasetError::BalancingFailure { .. } => CliError::Balancing(msg),
            DatasetError::Phantom(p) => p.into(),
            DatasetError::InvalidPolicy(_)
            | DatasetError::Split(_)
            | DatasetError::Empty
            | DatasetError::Invalid(_) => CliError::Usage(msg),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        let msg = e.to_string();
        match e {
            PhantomError::Io { .. } => CliError::Io(msg),
            PhantomError::Schema { .. } | PhantomError::Parse(_) => CliError::Format(msg),
            _ => CliError::Usage(msg),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Io { .. } => CliError::Io(msg),
            ModelError::BadMagic
            | ModelError::Version { .. }
            | ModelError::Truncated(_)
            | ModelError::Checksum { .. }
            | ModelError::Format(_) => CliError::Format(msg),
            ModelError::Diverged { .. } => CliError::Diverged(msg),
            ModelError::Ablation { source, .. } => match CliError::from(*source) {
                CliError::Diverged(_) => CliError::Diverged(msg),
                other => other,
            },
            ModelError::Config(_)
            | ModelError::Shape(_)
            | ModelError::State(_)
            | ModelError::Hyper(_)
            | ModelError::Empty => CliError::Usage(msg),
            ModelError::Nn(_) => CliError::Other(msg),
        }
    }
}

impl From<GuidanceError> for CliError {
    fn from(e: GuidanceError) -> Self {
        let msg = e.to_string();
        match e {
            GuidanceError::Infeasible { .. } | GuidanceError::EmptyExperience(_) => CliError::Infeasible(msg),
            GuidanceError::Config(_) => CliError::Usage(msg),
            GuidanceError::Model(m) => m.into(),
            GuidanceError::Phantom(p) => p.into(),
        }
    }
}
