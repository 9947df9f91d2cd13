use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing signal for feature family `{family}`: {detail}")]
    MissingSignal { family: String, detail: String },

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("degenerate evidence: {0}")]
    DegenerateEvidence(String),

    #[error("insufficient data: need {needed}, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("artifact rejected: {0}")]
    Artifact(String),

    #[error("retrieval refresh failed: {0}")]
    Callback(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn missing(family: &str, detail: impl Into<String>) -> Self {
        Error::MissingSignal {
            family: family.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, looking through stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
