use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum DemixError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tiff error: {0}")]
    Tiff(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl From<tiff::TiffError> for DemixError {
    fn from(e: tiff::TiffError) -> Self {
        DemixError::Tiff(e.to_string())
    }
}

impl From<serde_json::Error> for DemixError {
    fn from(e: serde_json::Error) -> Self {
        DemixError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DemixError>;
