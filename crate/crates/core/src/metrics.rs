//! Image-quality and detection-performance metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuf;

fn same_shape(a: &ImageBuf, b: &ImageBuf) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::Dimension(format!(
            "cannot compare {}x{}x{} with {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels; infinite for
/// identical images.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    same_shape(a, b)?;
    let sse: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = i64::from(x) - i64::from(y);
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse as f64 / a.data().len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

const WIN: usize = 11;
const WIN_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn window() -> [f64; WIN] {
    let half = (WIN / 2) as f64;
    let mut w = [0.0; WIN];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * WIN_SIGMA * WIN_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering of an h×w plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; WIN]) -> Vec<f64> {
    let (oh, ow) = (h - WIN + 1, w - WIN + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WIN).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

/// Mean SSIM of the BT.601 luma planes with an 11×11 Gaussian window
/// (σ = 1.5). Images smaller than the window use one global window.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Dimension(format!(
            "cannot compare {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (h, w) = (a.height(), a.width());
    let (x, y) = (a.luma(), b.luma());
    if h < WIN || w < WIN {
        let n = (h * w) as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cxy = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
        return Ok(ssim_term(mx, my, vx, vy, cxy));
    }
    let k = window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            ssim_term(ux, uy, sxx[i] - ux * ux, syy[i] - uy * uy, sxy[i] - ux * uy)
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn quality(a: &ImageBuf, b: &ImageBuf) -> Result<QualityScore> {
    Ok(QualityScore {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}

/// Area under the ROC curve as the Mann–Whitney statistic; ties count ½.
/// `NaN` when either side is empty.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut sorted_neg = neg.to_vec();
    sorted_neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos {
        let below = sorted_neg.partition_point(|&n| n < p);
        let not_above = sorted_neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// Points of the empirical ROC curve, one per distinct threshold, as
/// `(threshold, fpr, tpr)` with the decision `score > threshold`. The first
/// point uses `-inf` and yields (1, 1).
pub fn roc_points(pos: &[f64], neg: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let rate = |xs: &[f64], t: f64| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().filter(|&&v| v > t).count() as f64 / xs.len() as f64
        }
    };
    std::iter::once(f64::NEG_INFINITY)
        .chain(thresholds)
        .map(|t| (t, rate(neg, t), rate(pos, t)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub wdr: f64,
    pub fpr: f64,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl DetectionStats {
    /// `pos` and `neg` hold `(score, decision)` pairs for watermarked and
    /// clean inputs. Rates over an empty side are `NaN`.
    pub fn from_outcomes(pos: &[(f64, bool)], neg: &[(f64, bool)]) -> Self {
        let rate = |xs: &[(f64, bool)]| {
            if xs.is_empty() {
                f64::NAN
            } else {
                xs.iter().filter(|x| x.1).count() as f64 / xs.len() as f64
            }
        };
        let ps: Vec<f64> = pos.iter().map(|x| x.0).collect();
        let ns: Vec<f64> = neg.iter().map(|x| x.0).collect();
        Self {
            wdr: rate(pos),
            fpr: rate(neg),
            auc: roc_auc(&ps, &ns),
            n_pos: pos.len(),
            n_neg: neg.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

/// Per row, the mean over metrics of the min-max normalised value across
/// rows, with lower-better metrics inverted. A metric that is constant across
/// rows contributes 1. Infinite values are replaced by the most extreme
/// finite value of the same column.
pub fn combined_quality(table: &[Vec<f64>], orientation: &[Orientation]) -> Vec<f64> {
    let rows = table.len();
    if rows == 0 || orientation.is_empty() {
        return vec![f64::NAN; rows];
    }
    let mut sums = vec![0.0; rows];
    for (j, orient) in orientation.iter().enumerate() {
        let finite: Vec<f64> = table.iter().map(|r| r[j]).filter(|v| v.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, row) in table.iter().enumerate() {
            let v = match row[j] {
                v if v == f64::INFINITY => hi,
                v if v == f64::NEG_INFINITY => lo,
                v => v,
            };
            let unit = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
            sums[i] += match orient {
                Orientation::HigherBetter => unit,
                Orientation::LowerBetter if hi > lo => 1.0 - unit,
                Orientation::LowerBetter => 1.0,
            };
        }
    }
    sums.into_iter().map(|s| s / orientation.len() as f64).collect()
}

/// Rows whose combined quality falls below one half.
pub fn out_of_scope(combined: &[f64]) -> Vec<bool> {
    combined.iter().map(|&q| q < 0.5).collect()
}
