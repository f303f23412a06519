use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("TruncatedInput: {0}")]
    TruncatedInput(String),
    #[error("EmptyInput")]
    EmptyInput,
    #[error("EmptyList")]
    EmptyList,
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
    #[error("MissingFile: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("DuplicateId: {0}")]
    DuplicateId(String),
    #[error("BadParent: {id} references {parent}")]
    BadParent { id: String, parent: String },
    #[error("BadManifest: line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("MissingTrace")]
    MissingTrace,
    #[error("NonFiniteLoss at step {0}")]
    NonFiniteLoss(usize),
    #[error("BadMagic")]
    BadMagic,
    #[error("VersionMismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("CorruptCheckpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("NotPacked")]
    NotPacked,
    #[error("WindowTooLarge: window {window} > side {side}")]
    WindowTooLarge { window: usize, side: usize },
    #[error("TooManySegmentsForExact: {0}")]
    TooManySegmentsForExact(usize),
    #[error("TooManySegments: {0}")]
    TooManySegments(usize),
    #[error("MixedMethods")]
    MixedMethods,
    #[error("ClassTooSmall: family {family} has {count} samples")]
    ClassTooSmall { family: String, count: usize },
    #[error("EmptyTestSet")]
    EmptyTestSet,
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("ExternalTool: {0}")]
    ExternalTool(String),
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Input and configuration problems, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::TruncatedInput(_)
                | Error::EmptyInput
                | Error::EmptyList
                | Error::InvalidSpec(_)
                | Error::MissingFile(_)
                | Error::DuplicateId(_)
                | Error::BadParent { .. }
                | Error::BadManifest { .. }
                | Error::ShapeMismatch(_)
                | Error::BadMagic
                | Error::VersionMismatch { .. }
                | Error::CorruptCheckpoint(_)
                | Error::WindowTooLarge { .. }
                | Error::TooManySegmentsForExact(_)
                | Error::TooManySegments(_)
                | Error::MixedMethods
                | Error::ClassTooSmall { .. }
                | Error::EmptyTestSet
                | Error::InvalidConfig(_)
                | Error::Json(_)
        )
    }
}
