use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no complete {block}x{block} block fits in a {height}x{width} image at offset ({dy}, {dx})")]
    EmptyGrid {
        height: usize,
        width: usize,
        block: usize,
        dy: usize,
        dx: usize,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid key: {0}")]
    InvalidKey(String),

    #[error("key count K={0} must be 1 or an even number")]
    InvalidK(usize),

    #[error("unsupported channel count {0}; expected 1 or 3")]
    UnsupportedChannels(usize),

    #[error("invalid attack spec `{spec}`: {reason}")]
    InvalidAttack { spec: String, reason: String },

    #[error("attack `{0}` needs a pretrained neural codec and is not supported")]
    UnsupportedAttack(String),

    #[error("{0}")]
    Calibration(String),

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
