use std::path::PathBuf;

/// Errors raised by the mapping pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("misaligned: {0}")]
    Misaligned(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown CRS `{0}`")]
    UnknownCrs(String),
    #[error("point ({x}, {y}) outside raster extent")]
    OutsideExtent { x: f64, y: f64 },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn insufficient(msg: impl Into<String>) -> Self {
        Error::InsufficientData(msg.into())
    }

    /// True when the error happened inside a running pipeline stage rather
    /// than during up-front validation.
    pub fn is_stage_failure(&self) -> bool {
        matches!(self, Error::Stage { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
