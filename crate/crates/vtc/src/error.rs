use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence parse error at position {position}: {detail}")]
    SequenceParse { position: usize, detail: String },

    #[error("decode error at position {position}: {detail}")]
    Decode { position: usize, detail: String },

    #[error("checkpoint error at byte {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },

    #[error("image error: {0}")]
    Image(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("run directory is locked: {0}")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
