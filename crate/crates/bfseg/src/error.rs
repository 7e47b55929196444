use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or stride mismatch between grids that must align.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input values outside the documented domain (e.g. a non-binary label).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset layout or content problems (missing pairs, bad sizes).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint file cannot be read or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// An operation that needs at least one sample got none.
    #[error("no samples")]
    NoSamples,

    /// Analytic and measured complexity disagree; the message itemizes layers.
    #[error("complexity mismatch:\n{0}")]
    ComplexityMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
