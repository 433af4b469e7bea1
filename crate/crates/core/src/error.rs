use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed audio container: {0}")]
    Format(String),

    #[error("unsupported audio encoding: {0}")]
    Unsupported(String),

    #[error("audio contains no samples")]
    EmptyAudio,

    #[error("no voiced frames: every frame is below the silence threshold")]
    AllSilent,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("clip too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("normalization failed: {0}")]
    Normalization(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("closed-set violation: speaker {0:?} is not enrolled")]
    ClosedSet(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by the filesystem rather than by inputs or configuration.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
