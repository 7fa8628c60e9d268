//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A parameter lies outside its documented range (schedule bounds,
    /// timestep index, kernel size, ...).
    InvalidRange(String),
    /// Probability entries that are NaN or outside [0, 1].
    InvalidProbability(String),
    /// Tensor dimensions incompatible with the operation.
    ShapeMismatch(String),
    /// The posterior normalizer vanished for some entries; `entries` lists
    /// the first offending flat indices.
    DegeneratePosterior { entries: Vec<usize>, total: usize },
    /// A denoiser produced predictions that are not valid probabilities.
    InvalidPrediction(String),
    /// Empty or inconsistent training dataset.
    InvalidDataset(String),
    /// Metric undefined for the given inputs (e.g. AUPRC with no positives).
    UndefinedMetric(String),
    /// Config file parse failure or unknown key.
    Config(String),
    /// Malformed container, image, or checkpoint bytes.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidRange(msg) => write!(f, "invalid range: {msg}"),
            Error::InvalidProbability(msg) => write!(f, "invalid probability: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::DegeneratePosterior { entries, total } => write!(
                f,
                "degenerate posterior: normalizer vanished at {total} entries (first: {entries:?})"
            ),
            Error::InvalidPrediction(msg) => write!(f, "invalid prediction: {msg}"),
            Error::InvalidDataset(msg) => write!(f, "invalid dataset: {msg}"),
            Error::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Format(msg) => write!(f, "format: {msg}"),
            Error::Io(err) => write!(f, "io: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
