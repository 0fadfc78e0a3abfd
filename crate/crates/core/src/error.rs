//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, SrError>;

#[derive(Debug, thiserror::Error)]
pub enum SrError {
    #[error("config: {0}")]
    Config(String),

    #[error("ingest: unreadable image {file}: {reason}")]
    Ingest { file: PathBuf, reason: String },

    #[error("ingest: empty corpus in {0}")]
    EmptyCorpus(PathBuf),

    #[error("shape: {0}")]
    Shape(String),

    #[error("extraction: {0}")]
    Extraction(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("data: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {reason}")]
    Train { step: usize, reason: String },

    #[error("distillation failed at iteration {iteration}: {reason}")]
    Distill { iteration: usize, reason: String },

    #[error("inversion: {0}")]
    Inversion(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("dump: {0}")]
    Dump(String),

    #[error("report: {0}")]
    Report(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl SrError {
    /// Stable one-word category used by the CLI exit contract.
    pub fn category(&self) -> &'static str {
        match self {
            SrError::Config(_) => "config",
            SrError::Ingest { .. } | SrError::EmptyCorpus(_) => "ingest",
            SrError::Shape(_) => "shape",
            SrError::Extraction(_) => "extraction",
            SrError::Sampling(_) => "sampling",
            SrError::Integrity(_) => "integrity",
            SrError::Data(_) => "data",
            SrError::Train { .. } => "train",
            SrError::Distill { .. } => "distill",
            SrError::Inversion(_) => "inversion",
            SrError::Metric(_) => "metric",
            SrError::Dump(_) => "dump",
            SrError::Report(_) => "report",
            SrError::Io(_) => "io",
            SrError::Image(_) => "image",
            SrError::Serde(_) => "serde",
        }
    }
}
