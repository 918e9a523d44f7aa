use std::fmt;

use kanrec_core::KanError;

/// One diagnostic class per failure kind; printed as `class: message`.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
    Checkpoint(String),
    Explain(String),
    Io(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (class, msg) = match self {
            Self::Config(m) => ("config", m),
            Self::Data(m) => ("data", m),
            Self::Divergence(m) => ("divergence", m),
            Self::Checkpoint(m) => ("checkpoint", m),
            Self::Explain(m) => ("explain", m),
            Self::Io(m) => ("io", m),
        };
        // Diagnostics are single lines.
        write!(f, "{class}: {}", msg.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<KanError> for CliError {
    fn from(e: KanError) -> Self {
        let msg = e.to_string();
        match e {
            KanError::InvalidConfig(m) => Self::Config(m),
            KanError::InvalidArgument(m) => Self::Config(m),
            KanError::InvalidRatio(_) => Self::Config(msg),
            KanError::Diverged { .. } => Self::Divergence(msg),
            KanError::Parse { .. }
            | KanError::MissingColumn(_)
            | KanError::NoTimestamps
            | KanError::EmptyTestSet
            | KanError::IncompleteMatrix { .. }
            | KanError::ShapeMismatch { .. }
            | KanError::LengthMismatch { .. } => Self::Data(msg),
            KanError::NotKan
            | KanError::VersionMismatch { .. }
            | KanError::CorruptCheckpoint(_)
            | KanError::KindMismatch { .. } => Self::Checkpoint(msg),
            KanError::Io(_) | KanError::Json(_) => Self::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
