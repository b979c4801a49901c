use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SubBlockGrid;

/// Scheme parameters shared by embedding and detection.
///
/// The serialised field names follow the short parameter names used on the
/// command line (`l`, `k`, `m`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WatermarkParams {
    /// Interval length in coefficient units.
    #[serde(rename = "l")]
    pub interval_len: u32,
    /// Sub-block side in pixels.
    #[serde(rename = "k")]
    pub sub_block: usize,
    /// Block side in pixels.
    #[serde(rename = "m")]
    pub block: usize,
    /// DWT levels.
    #[serde(rename = "d")]
    pub levels: u32,
    /// Coefficients outside `[-r, r)` count as green.
    #[serde(rename = "r")]
    pub range: u32,
    pub round_val: u32,
    pub max_perturb_intervals: u32,
    pub alpha: f64,
    pub entropy_adaptive: bool,
    pub entropy_percentile: f64,
    #[serde(rename = "K")]
    pub key_count: usize,
}

impl Default for WatermarkParams {
    fn default() -> Self {
        Self {
            interval_len: 8,
            sub_block: 8,
            block: 96,
            levels: 3,
            range: 3000,
            round_val: 30,
            max_perturb_intervals: 3,
            alpha: 0.05,
            entropy_adaptive: false,
            entropy_percentile: 0.5,
            key_count: 1,
        }
    }
}

impl WatermarkParams {
    /// The configuration used for the geometric-robustness experiments:
    /// wider intervals, embedding only in high-entropy blocks.
    pub fn robust() -> Self {
        Self {
            interval_len: 14,
            entropy_adaptive: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        SubBlockGrid::new(self.block, self.sub_block, self.levels)?;
        if self.interval_len == 0 {
            return Err(Error::InvalidParams("interval length must be positive".into()));
        }
        if self.range == 0 {
            return Err(Error::InvalidParams("coefficient range must be positive".into()));
        }
        if self.round_val == 0 || self.round_val > 255 {
            return Err(Error::InvalidParams("round_val must lie in 1..=255".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParams(format!("alpha {} is outside (0, 1)", self.alpha)));
        }
        if !(self.entropy_percentile > 0.0 && self.entropy_percentile <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "entropy percentile {} is outside (0, 1]",
                self.entropy_percentile
            )));
        }
        if self.key_count == 0 || (self.key_count > 1 && !self.key_count.is_multiple_of(2)) {
            return Err(Error::InvalidK(self.key_count));
        }
        Ok(())
    }

    /// Side of the pixel tile that one level-d LL coefficient summarises.
    pub fn tile(&self) -> usize {
        1 << self.levels
    }

    /// LL coefficients per block per channel.
    pub fn coeffs_per_block(&self) -> usize {
        let per_axis = self.block / self.tile();
        per_axis * per_axis
    }

    /// Number of intervals tiling `[-r, r)`; the last one may overhang `r`.
    pub fn interval_count(&self) -> usize {
        (2 * self.range as usize).div_ceil(self.interval_len as usize)
    }
}
