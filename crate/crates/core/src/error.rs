use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite values in {what} (layer {layer:?})")]
    Numeric { what: String, layer: Option<usize> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("unknown adapter set id {0}")]
    UnknownAdapterSet(usize),

    #[error("adapter set was built over a different frozen base")]
    ForeignBase,

    #[error("mismatched reports: {0}")]
    ReportMismatch(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, expected \"MXLR\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("unknown dtype code {0}")]
    UnknownDType(u8),

    #[error("checkpoint holds {found:?} tensors, expected {expected:?}")]
    DTypeMismatch { found: u8, expected: u8 },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),

    #[error("{0} trailing bytes after last tensor record")]
    TrailingBytes(usize),
}
