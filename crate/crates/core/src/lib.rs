//! Blind, keyed, block-local watermarking in the low-frequency Haar band.
//!
//! The image is cut into m×m blocks. Each block's rounded mean selects, together
//! with a secret key, a pseudorandom red/green colouring of the coefficient
//! axis; embedding pushes every level-d LL coefficient of the block's k×k
//! sub-blocks into a green interval. Detection recounts green coefficients per
//! block, applies a one-sided binomial test and reports the fraction of
//! watermarked blocks together with a block-resolution map.

pub mod attacks;
pub mod bench;
pub mod detect;
pub mod embed;
pub mod error;
pub mod image;
pub mod keying;
pub mod metrics;
pub mod params;
pub mod synth;
pub mod wavelet;

pub use detect::{crop_search, detect_image, CropSearchConfig, CropStrategy, DetectionResult};
pub use embed::{embed_image, EmbedReport};
pub use error::{Error, Result};
pub use image::ImageBuf;
pub use keying::{BlockSeed, KeySet, Partition, SecretKey};
pub use params::WatermarkParams;
