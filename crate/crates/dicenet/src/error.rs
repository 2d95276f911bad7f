use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("no foreground voxels in the batch truth")]
    EmptyTruth,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format error at byte {offset}: {detail}")]
    Checkpoint { offset: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NetError::Shape {
        op,
        detail: detail.into(),
    })
}
