use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("infeasible target: {0}")]
    InfeasibleTarget(String),

    #[error("insufficient decay: {0}")]
    InsufficientDecay(String),

    #[error("signal too short: need at least {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("scene generation failed: {0}")]
    SceneGeneration(String),

    #[error("campaign failed: {0}")]
    Campaign(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidValue {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Short category label, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::InvalidValue { .. } => "config",
            Error::InvalidGeometry(_) => "geometry",
            Error::InfeasibleTarget(_) => "infeasible",
            Error::InsufficientDecay(_) => "decay",
            Error::SignalTooShort { .. } | Error::Dimension(_) => "input",
            Error::SceneGeneration(_) | Error::Campaign(_) => "campaign",
            Error::Format(_) | Error::Csv(_) | Error::Json(_) | Error::Wav(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
