//! Crop-resilient detection: brute-force search over the m² possible grid
//! origins.
//!
//! Re-running the wavelet transform for thousands of offsets is wasteful. With
//! the Haar filter every level-d LL coefficient equals the sum of its 2^d×2^d
//! pixel tile divided by 2^d, exactly, so [`OffsetScorer`] precomputes tile sums
//! and an integral image per channel and classifies tile sums through a lookup
//! table built from the same [`Partition`]. Entropy histograms slide along each
//! row of offsets instead of being rebuilt per block. The resulting
//! [`ScoreGrid`] is identical to [`super::score_grid`] at the same offset.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{best_key_cell, evaluate, hypothesis_threshold, DetectionResult, ScoreGrid};
use crate::embed::{entropy_from_histogram, entropy_threshold};
use crate::error::{Error, Result};
use crate::image::{ChannelPlane, ImageBuf};
use crate::keying::{seed_from_sum, KeySet, PartitionTable};
use crate::params::WatermarkParams;
use crate::wavelet::{Wavelet, WAVELET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropStrategy {
    /// Full sweep, keep the best-scoring offset.
    MaxScore,
    /// Stop at the first offset whose score reaches `stop_p`.
    FixedThreshold,
    /// Stop once a one-sided test that more than half the blocks are green
    /// rejects at `significance`.
    ProportionTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSearchConfig {
    pub strategy: CropStrategy,
    pub stop_p: f64,
    pub significance: f64,
    pub offset_stride: usize,
}

impl Default for CropSearchConfig {
    fn default() -> Self {
        Self {
            strategy: CropStrategy::FixedThreshold,
            stop_p: 0.8,
            significance: 0.05,
            offset_stride: 1,
        }
    }
}

impl CropSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stop_p > 0.0 && self.stop_p <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "stop_p {} is outside (0, 1]",
                self.stop_p
            )));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::InvalidParams(format!(
                "significance {} is outside (0, 1)",
                self.significance
            )));
        }
        if self.offset_stride == 0 {
            return Err(Error::InvalidParams("offset stride must be positive".into()));
        }
        Ok(())
    }
}

struct ChannelIndex {
    plane: ChannelPlane,
    /// Sum of the tile starting at each pixel; `tiles_w` columns.
    tiles: Vec<u32>,
    tiles_w: usize,
    /// Summed-area table with a zero first row and column.
    integral: Vec<u64>,
}

impl ChannelIndex {
    fn new(plane: ChannelPlane, tile: usize) -> Self {
        let (h, w) = (plane.height, plane.width);
        let iw = w + 1;
        let mut integral = vec![0u64; (h + 1) * iw];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += u64::from(plane.get(y, x));
                integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row;
            }
        }
        let (th, tiles_w) = if h >= tile && w >= tile {
            (h - tile + 1, w - tile + 1)
        } else {
            (0, 0)
        };
        let mut tiles = vec![0u32; th * tiles_w];
        for y in 0..th {
            for x in 0..tiles_w {
                let s = integral[(y + tile) * iw + x + tile] + integral[y * iw + x]
                    - integral[y * iw + x + tile]
                    - integral[(y + tile) * iw + x];
                tiles[y * tiles_w + x] = s as u32;
            }
        }
        Self {
            plane,
            tiles,
            tiles_w,
            integral,
        }
    }

    fn square_sum(&self, y: usize, x: usize, size: usize) -> u64 {
        let iw = self.plane.width + 1;
        self.integral[(y + size) * iw + x + size] + self.integral[y * iw + x]
            - self.integral[y * iw + x + size]
            - self.integral[(y + size) * iw + x]
    }
}

/// Fast block scorer for arbitrary grid offsets.
pub struct OffsetScorer<'a> {
    params: &'a WatermarkParams,
    table: &'a PartitionTable,
    height: usize,
    width: usize,
    tile: usize,
    channels: Vec<ChannelIndex>,
    /// Per seed slot, per key: green flag for every possible tile sum.
    luts: Vec<OnceLock<Vec<Vec<bool>>>>,
}

impl<'a> OffsetScorer<'a> {
    pub fn new(img: &ImageBuf, params: &'a WatermarkParams, table: &'a PartitionTable) -> Self {
        debug_assert_eq!(WAVELET, Wavelet::Haar, "tile-sum shortcut holds for Haar only");
        let tile = params.tile();
        let channels = crate::image::split_channels(img)
            .into_iter()
            .map(|p| ChannelIndex::new(p, tile))
            .collect();
        Self {
            params,
            table,
            height: img.height(),
            width: img.width(),
            tile,
            channels,
            luts: (0..=255 / params.round_val).map(|_| OnceLock::new()).collect(),
        }
    }

    fn lut(&self, seed_slot: usize) -> &Vec<Vec<bool>> {
        self.luts[seed_slot].get_or_init(|| {
            let seed = crate::keying::BlockSeed(seed_slot as u32 * self.params.round_val);
            let scale = self.tile as f64;
            let max_sum = 255 * self.tile * self.tile;
            self.table
                .get(seed)
                .iter()
                .map(|part| (0..=max_sum).map(|s| part.is_green(s as f64 / scale)).collect())
                .collect()
        })
    }

    fn grid_dims(&self, offset: (usize, usize)) -> (usize, usize) {
        let m = self.params.block;
        (
            self.height.saturating_sub(offset.0) / m,
            self.width.saturating_sub(offset.1) / m,
        )
    }

    fn count(&self, ch: &ChannelIndex, y0: usize, x0: usize, lut: &[bool]) -> u32 {
        let per_axis = self.params.block / self.tile;
        let mut n = 0;
        for a in 0..per_axis {
            let row = (y0 + a * self.tile) * ch.tiles_w + x0;
            for b in 0..per_axis {
                n += lut[ch.tiles[row + b * self.tile] as usize] as u32;
            }
        }
        n
    }

    fn build(&self, offset: (usize, usize), gates: Option<&[Vec<bool>]>) -> Option<ScoreGrid> {
        let (rows, cols) = self.grid_dims(offset);
        if rows == 0 || cols == 0 {
            return None;
        }
        let m = self.params.block;
        let area = (m * m) as u64;
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (y, x) = (offset.0 + r * m, offset.1 + c * m);
                let idx = r * cols + c;
                let slots: Vec<Option<usize>> = self
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(ci, ch)| {
                        let on = gates.is_none_or(|g| g[ci][idx]);
                        on.then(|| {
                            let seed = seed_from_sum(ch.square_sum(y, x, m), area, self.params.round_val);
                            (seed.0 / self.params.round_val) as usize
                        })
                    })
                    .collect();
                let cell = best_key_cell(self.table.key_count(), |key| {
                    self.channels
                        .iter()
                        .zip(&slots)
                        .map(|(ch, slot)| slot.map(|s| self.count(ch, y, x, &self.lut(s)[key])))
                        .collect()
                });
                cells.push(cell);
            }
        }
        Some(ScoreGrid {
            rows,
            cols,
            offset,
            coeffs_per_block: self.params.coeffs_per_block(),
            cells,
        })
    }

    /// Block counts at `offset`, or `None` if no complete block fits.
    pub fn score_grid(&self, offset: (usize, usize)) -> Option<ScoreGrid> {
        if !self.params.entropy_adaptive {
            return self.build(offset, None);
        }
        let (rows, cols) = self.grid_dims(offset);
        if rows == 0 || cols == 0 {
            return None;
        }
        let m = self.params.block;
        let gates: Vec<Vec<bool>> = self
            .channels
            .iter()
            .map(|ch| {
                let hs: Vec<f64> = (0..rows * cols)
                    .map(|i| {
                        let (y, x) = (offset.0 + (i / cols) * m, offset.1 + (i % cols) * m);
                        crate::embed::block_entropy(&ch.plane.square(y, x, m))
                    })
                    .collect();
                gate_from_entropies(&hs, self.params.entropy_percentile)
            })
            .collect();
        self.build(offset, Some(&gates))
    }

    /// Scores every offset `(dy, dx)` for the given `dy`, in increasing `dx`,
    /// calling `visit` until it returns `true`.
    fn scan_row(&self, dy: usize, stride: usize, mut visit: impl FnMut(usize, ScoreGrid) -> bool) {
        let m = self.params.block;
        if !self.params.entropy_adaptive {
            for dx in (0..m).step_by(stride) {
                if let Some(g) = self.build((dy, dx), None) {
                    if visit(dx, g) {
                        return;
                    }
                }
            }
            return;
        }
        let (rows, cols0) = self.grid_dims((dy, 0));
        if rows == 0 || cols0 == 0 {
            return;
        }
        // histograms[channel][block], block = r * cols0 + c at the current dx
        let mut hists: Vec<Vec<[u32; 256]>> = self
            .channels
            .iter()
            .map(|ch| {
                (0..rows * cols0)
                    .map(|i| {
                        let mut h = [0u32; 256];
                        let (y, x) = (dy + (i / cols0) * m, (i % cols0) * m);
                        for yy in y..y + m {
                            for xx in x..x + m {
                                h[ch.plane.get(yy, xx) as usize] += 1;
                            }
                        }
                        h
                    })
                    .collect()
            })
            .collect();
        let total = (m * m) as u32;
        let mut dx = 0;
        while dx < m {
            let (_, cols) = self.grid_dims((dy, dx));
            if cols == 0 {
                break;
            }
            let gates: Vec<Vec<bool>> = hists
                .iter()
                .map(|hs| {
                    let es: Vec<f64> = (0..rows * cols)
                        .map(|i| entropy_from_histogram(&hs[(i / cols) * cols0 + i % cols], total))
                        .collect();
                    gate_from_entropies(&es, self.params.entropy_percentile)
                })
                .collect();
            if let Some(g) = self.build((dy, dx), Some(&gates)) {
                if visit(dx, g) {
                    return;
                }
            }
            let next = dx + stride;
            if next >= m {
                break;
            }
            let (_, next_cols) = self.grid_dims((dy, next));
            for (ch, hs) in self.channels.iter().zip(hists.iter_mut()) {
                for r in 0..rows {
                    for c in 0..next_cols {
                        let h = &mut hs[r * cols0 + c];
                        let y = dy + r * m;
                        let x = dx + c * m;
                        for yy in y..y + m {
                            for xx in x..x + stride {
                                h[ch.plane.get(yy, xx) as usize] -= 1;
                            }
                            for xx in x + m..x + m + stride {
                                h[ch.plane.get(yy, xx) as usize] += 1;
                            }
                        }
                    }
                }
            }
            dx = next;
        }
    }
}

fn gate_from_entropies(entropies: &[f64], percentile: f64) -> Vec<bool> {
    let t = entropy_threshold(entropies, percentile);
    entropies.iter().map(|&h| h > t).collect()
}

struct RowOutcome {
    best: Option<(usize, f64, ScoreGrid)>,
    stop: Option<(usize, ScoreGrid)>,
}

pub fn crop_search(
    img: &ImageBuf,
    params: &WatermarkParams,
    keyset: &KeySet,
    tau: f64,
    cfg: &CropSearchConfig,
) -> Result<DetectionResult> {
    params.validate()?;
    cfg.validate()?;
    let table = PartitionTable::new(keyset, params);
    let scorer = OffsetScorer::new(img, params, &table);
    let key_count = keyset.len();
    let m = params.block;
    let stride = cfg.offset_stride;
    let per_row = m.div_ceil(stride);
    let block_thr = hypothesis_threshold(params.coeffs_per_block(), params.alpha / key_count as f64);

    let green_and_scored = |g: &ScoreGrid| -> (usize, usize) {
        let mut green = 0;
        let mut scored = 0;
        for cell in &g.cells {
            let a = cell.active_channels() as u32;
            if a > 0 {
                scored += 1;
                if cell.total() >= block_thr * a {
                    green += 1;
                }
            }
        }
        (green, scored)
    };
    let stops = |g: &ScoreGrid| -> bool {
        let (green, scored) = green_and_scored(g);
        match cfg.strategy {
            CropStrategy::MaxScore => false,
            CropStrategy::FixedThreshold => scored > 0 && green as f64 / scored as f64 >= cfg.stop_p,
            CropStrategy::ProportionTest => {
                scored > 0 && green as u32 >= hypothesis_threshold(scored, cfg.significance)
            }
        }
    };
    let score_of = |g: &ScoreGrid| {
        let (green, scored) = green_and_scored(g);
        if scored == 0 {
            0.0
        } else {
            green as f64 / scored as f64
        }
    };

    let scan = |dy: usize| -> RowOutcome {
        let mut out = RowOutcome { best: None, stop: None };
        scorer.scan_row(dy, stride, |dx, g| {
            let s = score_of(&g);
            if stops(&g) {
                out.stop = Some((dx, g));
                return true;
            }
            if out.best.as_ref().is_none_or(|(_, b, _)| s > *b) {
                out.best = Some((dx, s, g));
            }
            false
        });
        out
    };

    let dys: Vec<usize> = (0..m).step_by(stride).collect();
    let chunk = rayon::current_num_threads().max(1);
    let mut best: Option<(usize, usize, f64, ScoreGrid)> = None;
    let mut stopped: Option<(usize, usize, ScoreGrid)> = None;
    'rows: for (ci, group) in dys.chunks(chunk).enumerate() {
        let outcomes: Vec<RowOutcome> = group.par_iter().map(|&dy| scan(dy)).collect();
        for (gi, outcome) in outcomes.into_iter().enumerate() {
            let row_index = ci * chunk + gi;
            if let Some((dx, s, g)) = outcome.best {
                if best.as_ref().is_none_or(|(_, _, b, _)| s > *b) {
                    best = Some((row_index, dx, s, g));
                }
            }
            if let Some((dx, g)) = outcome.stop {
                stopped = Some((row_index, dx, g));
                break 'rows;
            }
        }
    }

    let (grid, row_index, dx, found) = match (stopped, best) {
        (Some((ri, dx, g)), _) => (g, ri, dx, true),
        (None, Some((ri, dx, _, g))) => (g, ri, dx, false),
        (None, None) => {
            return Err(Error::EmptyGrid {
                height: img.height(),
                width: img.width(),
                block: m,
                dy: 0,
                dx: 0,
            })
        }
    };
    let decision_tau = match cfg.strategy {
        CropStrategy::FixedThreshold => cfg.stop_p,
        _ => tau,
    };
    let mut result = evaluate(&grid, params, key_count, decision_tau);
    result.decision = match cfg.strategy {
        CropStrategy::MaxScore => result.score > tau,
        _ => found,
    };
    result.crop_offset = Some(grid.offset);
    result.offsets_tested = if found {
        row_index * per_row + dx / stride + 1
    } else {
        dys.len() * per_row
    };
    Ok(result)
}
