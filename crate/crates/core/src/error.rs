use std::path::PathBuf;

/// Errors produced anywhere in the segmentation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A raster does not have the channel layout an operation requires.
    #[error("representation error: {0}")]
    Representation(String),

    /// Input data violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor shapes are incompatible inside a layer.
    #[error("shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are not in the expected format.
    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    /// Wise cropping was requested on a field whose mask has no positive pixel.
    #[error("no positive region in field {field_id}")]
    NoPositiveRegion { field_id: String },

    /// Stitched tiles leave at least one pixel uncovered.
    #[error("tiles do not cover pixel (row {row}, col {col})")]
    Coverage { row: usize, col: usize },

    /// An operation was called in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {provenance}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        provenance: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
