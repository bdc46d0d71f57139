use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid supernet: {0}")]
    InvalidSupernet(String),
    #[error("invalid operation: {0}")]
    InvalidOperation(String),
    #[error("invalid cell: {0}")]
    InvalidCell(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape underflow at cell {cell}: spatial size {width}x{height} cannot be reduced")]
    ShapeUnderflow {
        cell: usize,
        width: u32,
        height: u32,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid stamp size {n_s}: must be in 1..={max}")]
    InvalidStampSize { n_s: usize, max: usize },
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("search infeasible: {0}")]
    SearchInfeasible(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid attack: {0}")]
    InvalidAttack(String),
    #[error("trace parse error at line {line}: {reason}")]
    TraceParse { line: usize, reason: String },
    #[error("not a cell-based NAS model: {0}")]
    NotNasModel(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(String),
    #[error("json: {0}")]
    Json(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
