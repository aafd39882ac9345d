use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid layer, model or training configuration, including shape and
    /// group mismatches between operands.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error: {op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("autograd error: {0}")]
    Autograd(String),

    #[error("numeric error: gradient of parameter `{0}` is not finite")]
    NonFiniteGrad(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("failed to parse config: {0}")]
    ConfigParse(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a DMF1 checkpoint (bad magic bytes {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported DMF1 checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor `{name}` stored as {found}, model uses {expected}")]
    DtypeMismatch {
        name: String,
        found: &'static str,
        expected: &'static str,
    },
    #[error("checkpoint config does not match the target model config")]
    ConfigMismatch,
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint holds unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
