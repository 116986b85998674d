use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or malformed format: {0}")]
    Format(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("checksum mismatch (expected {expected:08x}, found {found:08x})")]
    Checksum { expected: u32, found: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("model kind mismatch: checkpoint holds `{found}`, expected `{expected}`")]
    ModelKind { expected: String, found: String },

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("parameter shape mismatch: {}", .0.join(", "))]
    ShapeMismatch(Vec<String>),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
