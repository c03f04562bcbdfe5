use std::path::PathBuf;

/// Errors produced anywhere in the audit pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: u64, reason: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("image too small: {width}x{height}, need at least 8x8")]
    TooSmall { width: usize, height: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("policy target unattainable: {reason} (achievable frontier: tpr in [{min_tpr}, {max_tpr}], fpr in [{min_fpr}, {max_fpr}])")]
    UnattainablePolicy {
        reason: String,
        min_tpr: f64,
        max_tpr: f64,
        min_fpr: f64,
        max_fpr: f64,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("corpus integrity error: {0}")]
    CorpusIntegrity(String),

    #[error("{}: not found; {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: &'static str },

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}
