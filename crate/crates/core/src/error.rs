use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("stage error: expected {expected}, found {found}")]
    Stage { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("no ground truth for utterance {0}")]
    NoGroundTruth(String),

    #[error("unknown speaker {0} and no imported embedding")]
    UnknownSpeaker(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, used by the CLI's single-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Validation(_) => "validation",
            Error::Stage { .. } => "stage",
            Error::Config(_) => "config",
            Error::NoGroundTruth(_) => "no_ground_truth",
            Error::UnknownSpeaker(_) => "unknown_speaker",
            Error::Contract(_) => "contract",
            Error::Json(_) => "json",
        }
    }
}
