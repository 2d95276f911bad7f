use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("box out of range: {0}")]
    Bounds(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("unknown subject id {0}")]
    UnknownSubject(u32),
    #[error("localization failed: {0}")]
    LocalizationFailed(String),
    #[error("empty truth mask")]
    EmptyTruth,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
