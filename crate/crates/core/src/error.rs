use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch ({detail})")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range 0..{bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("tracker scope mismatch: expected to close `{expected}`, found `{found}`")]
    ScopeMismatch { expected: String, found: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file{}: {detail}", tensor.as_ref().map(|t| format!(" at tensor `{t}`")).unwrap_or_default())]
    Truncated {
        tensor: Option<String>,
        detail: String,
    },

    #[error("corrupt packing for tensor `{tensor}`: {detail}")]
    CorruptPacking { tensor: String, detail: String },

    #[error("unknown block id {0}")]
    UnknownBlock(usize),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("graph structure: {0}")]
    GraphStructure(String),

    #[error("checkpoint chain broken at block {index}: {detail}")]
    ChainBroken { index: usize, detail: String },

    #[error("manifest references tensor `{0}` missing from the weight store")]
    DanglingTensor(String),

    #[error("manifest references adapter `{0}` missing from the LoRA state")]
    DanglingAdapter(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint spill failed at {path}: {source}")]
    Spill {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("corpus sizing: {0}")]
    Sizing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("manifest encoding: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
