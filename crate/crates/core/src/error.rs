use std::path::PathBuf;

/// Errors raised anywhere in the engine.
///
/// Pipeline stages wrap component errors in [`Error::Stage`] so a failure
/// report says which step of a turn produced it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("reward weights must sum to 1 (got {sum})")]
    WeightSum { sum: f64 },

    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },

    #[error("invalid dimension: {0}")]
    Dim(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("parse error at {source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("duplicate passage id `{0}`")]
    DuplicateId(String),

    #[error("expected {expected} scores, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("empty document: {0}")]
    EmptyDoc(String),

    #[error("candidate list is empty")]
    EmptyCandidateList,

    #[error("no knowledge available to generate from")]
    NoKnowledge,

    #[error("retrieval set is empty")]
    EmptyRetrieval,

    #[error("prompt mode {mode} {reason}")]
    ModeArgMismatch { mode: String, reason: &'static str },

    #[error("token `{0}` not found in embedding store")]
    MissingToken(String),

    #[error("integrity error in dialog {dialog}: {reason}")]
    Integrity { dialog: String, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("http error {status}: {body}")]
    Http { status: u16, body: String },

    #[error("request timed out: {0}")]
    Timeout(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn range(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Range {
            what,
            detail: detail.into(),
        }
    }

    /// Attach a pipeline stage label.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the external chat-completion transport.
    pub fn is_client_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Http { .. } | Error::Timeout(_) | Error::Transport(_) | Error::MalformedResponse(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
