use thiserror::Error;

/// Errors produced by the cemx library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("SingularKernel: composed filter is identically zero")]
    SingularKernel,
    #[error("KernelFormatError: {0}")]
    KernelFormat(String),
    #[error("dense oracle too large: {rows}x{cols} exceeds 16x16")]
    OracleTooLarge { rows: usize, cols: usize },
    #[error("graph shape error: {0}")]
    GraphShape(String),
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("session busy: a job is already running")]
    Busy,
    #[error("NothingToUndo: history is empty")]
    NothingToUndo,
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
