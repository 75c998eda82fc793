use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid timestep pair: t_lo={t_lo}, t_hi={t_hi} (T={total})")]
    TimestepPair { t_lo: usize, t_hi: usize, total: usize },

    #[error("timestep {t} outside 1..={total}")]
    TimestepRange { t: usize, total: usize },

    #[error("condition label {label} outside 0..{num_conditions}")]
    Label { label: usize, num_conditions: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parameter mismatch: {0}")]
    Parameters(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("missing or unreadable files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("infeasible layout for condition `{condition}`: could not place {count} non-overlapping blobs")]
    Infeasible { condition: String, count: usize },

    #[error("metric: {0}")]
    Metric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse { path: path.into(), message: message.to_string() }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schedule(_)
                | Error::TimestepPair { .. }
                | Error::TimestepRange { .. }
                | Error::Label { .. }
                | Error::Shape { .. }
                | Error::Config(_)
                | Error::Parameters(_)
                | Error::Parse { .. }
        )
    }
}
