use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"V21T\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported format version {found}")]
    VersionMismatch { path: PathBuf, found: u32 },
    #[error("{path}: truncated or oversized payload ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("feature file missing for subject {subject}, metric {metric}, view {view}, k={k}: {path}")]
    MissingFeatures { subject: String, metric: String, view: String, k: usize, path: PathBuf },
    #[error("negative activation {value} in {context}")]
    NegativeActivation { value: f32, context: String },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Wraps the error with a description of the stage that produced it.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// True when the error stems from bad user input rather than I/O or data.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Invalid(_) | Error::Shape(_) => true,
            Error::Context { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
