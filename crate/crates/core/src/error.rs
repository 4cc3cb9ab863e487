use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} outside lookup table of {identities} identities")]
    LabelOutOfRange { label: u32, identities: usize },

    #[error("image {image} expects {expected} labeled rows, got {got}")]
    BankRowCount {
        image: u64,
        expected: usize,
        got: usize,
    },

    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("dataset needs at least two images to appoint pairs")]
    SingleImage,

    #[error("empty feature subset with lambda > 0")]
    EmptySubset,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("no valid queries in dataset")]
    NoQueries,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
