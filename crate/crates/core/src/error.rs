use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("module is frozen and cannot be mutated")]
    Frozen,

    #[error("guidance kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error(
        "composition incompatible: guidance dims (state {guidance_state}, action {guidance_action}) \
         vs policy dims (state {policy_state}, action {policy_action})"
    )]
    CompositionIncompatible {
        guidance_state: usize,
        guidance_action: usize,
        policy_state: usize,
        policy_action: usize,
    },

    #[error("checksum mismatch")]
    Checksum,

    #[error("bad magic tag")]
    Magic,

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("no normalization anchors registered for env '{0}'")]
    MissingAnchor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
