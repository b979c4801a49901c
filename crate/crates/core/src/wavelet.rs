//! Multi-level 2-D orthonormal Haar transform on square sub-blocks.
//!
//! Each level maps a 2×2 neighbourhood `[a b; c d]` to
//! `LL = (a+b+c+d)/2`, `LH = (a-b+c-d)/2`, `HL = (a+b-c-d)/2`, `HH = (a-b-c+d)/2`.
//! The factor 1/2 is exact in binary floating point, so integer inputs give
//! dyadic-rational coefficients with no rounding: at level `d` every LL
//! coefficient is the sum of its 2^d × 2^d pixel tile divided by 2^d.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wavelet {
    Haar,
}

/// The wavelet family used for embedding and detection.
pub const WAVELET: Wavelet = Wavelet::Haar;

/// Detail bands of one decomposition level, each `dim`×`dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands {
    pub dim: usize,
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoeffPyramid {
    /// Input side length.
    pub size: usize,
    /// Detail bands, finest level first.
    pub details: Vec<DetailBands>,
    /// Level-d approximation band, `ll_dim`×`ll_dim`.
    pub ll: Vec<f64>,
    pub ll_dim: usize,
}

impl CoeffPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Squared l2 norm over every band.
    pub fn energy(&self) -> f64 {
        let detail: f64 = self
            .details
            .iter()
            .map(|b| b.lh.iter().chain(&b.hl).chain(&b.hh).map(|v| v * v).sum::<f64>())
            .sum();
        detail + self.ll.iter().map(|v| v * v).sum::<f64>()
    }
}

fn analysis_step(src: &[f64], dim: usize) -> (Vec<f64>, DetailBands) {
    let half = dim / 2;
    let n = half * half;
    let (mut ll, mut lh, mut hl, mut hh) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..half {
        let top = 2 * i * dim;
        let bot = top + dim;
        for j in 0..half {
            let a = src[top + 2 * j];
            let b = src[top + 2 * j + 1];
            let c = src[bot + 2 * j];
            let d = src[bot + 2 * j + 1];
            ll.push((a + b + c + d) * 0.5);
            lh.push((a - b + c - d) * 0.5);
            hl.push((a + b - c - d) * 0.5);
            hh.push((a - b - c + d) * 0.5);
        }
    }
    (ll, DetailBands { dim: half, lh, hl, hh })
}

fn synthesis_step(ll: &[f64], bands: &DetailBands) -> Vec<f64> {
    let half = bands.dim;
    let dim = half * 2;
    let mut out = vec![0.0; dim * dim];
    for i in 0..half {
        for j in 0..half {
            let idx = i * half + j;
            let (s, h, v, d) = (ll[idx], bands.lh[idx], bands.hl[idx], bands.hh[idx]);
            let top = 2 * i * dim + 2 * j;
            let bot = top + dim;
            out[top] = (s + h + v + d) * 0.5;
            out[top + 1] = (s - h + v - d) * 0.5;
            out[bot] = (s + h - v - d) * 0.5;
            out[bot + 1] = (s - h - v + d) * 0.5;
        }
    }
    out
}

/// Mallat decomposition of a `size`×`size` block into `levels` levels.
pub fn dwt2_multilevel(block: &[f64], size: usize, levels: usize) -> Result<CoeffPyramid> {
    if block.len() != size * size {
        return Err(Error::ShapeMismatch {
            expected: (size, size),
            actual: (block.len(), 1),
        });
    }
    let mut details = Vec::with_capacity(levels);
    let mut ll = block.to_vec();
    let mut dim = size;
    for level in 0..levels {
        if !dim.is_multiple_of(2) || dim == 0 {
            return Err(Error::Dimension(format!(
                "LL band of side {dim} at level {level} cannot be halved"
            )));
        }
        let (next, bands) = analysis_step(&ll, dim);
        details.push(bands);
        ll = next;
        dim /= 2;
    }
    Ok(CoeffPyramid {
        size,
        details,
        ll,
        ll_dim: dim,
    })
}

pub fn idwt2_multilevel(pyr: &CoeffPyramid) -> Vec<f64> {
    let mut ll = pyr.ll.clone();
    for bands in pyr.details.iter().rev() {
        ll = synthesis_step(&ll, bands);
    }
    ll
}

/// Returns a copy of `pyr` with its level-d LL band replaced.
pub fn set_ll_coefficients(pyr: &CoeffPyramid, new_ll: &[f64]) -> Result<CoeffPyramid> {
    if new_ll.len() != pyr.ll.len() {
        return Err(Error::ShapeMismatch {
            expected: (pyr.ll_dim, pyr.ll_dim),
            actual: (new_ll.len(), 1),
        });
    }
    Ok(CoeffPyramid {
        size: pyr.size,
        details: pyr.details.clone(),
        ll: new_ll.to_vec(),
        ll_dim: pyr.ll_dim,
    })
}
