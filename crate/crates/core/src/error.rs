use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("update ({row}, {col}) out of range for a {n} x {d} matrix")]
    IndexOutOfRange { row: u64, col: usize, n: u64, d: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("incompatible sketches: {0}")]
    Mismatch(String),

    #[error(
        "found {found} heavy rows but {needed} are required; increase r/s or lower k"
    )]
    InsufficientHeavyHitters { found: usize, needed: usize },

    #[error("embedded matrix is rank deficient: {deficient} of {d} columns are degenerate")]
    RankDeficient { deficient: usize, d: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("csv record {record}, column {column}: {msg}")]
    Csv {
        record: usize,
        column: usize,
        msg: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
