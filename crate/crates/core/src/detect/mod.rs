//! Watermark detection: per-block green counts, the one-sided binomial test,
//! block-level detection maps and the global score.
//!
//! Per block, the green counts of all channels are averaged and compared
//! against the single-channel threshold `c* = ceil(z_{1-alpha}/2 * sqrt(N) + N/2)`.
//! The mean of independent channel counts has a smaller null variance than one
//! channel, so the test is conservative. With several keys a block is green
//! if any key passes at `alpha / K`.

mod crop;
mod overlay;

pub use crop::{crop_search, CropSearchConfig, CropStrategy, OffsetScorer};
pub use overlay::render_overlay;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::embed::entropy_gate;
use crate::error::Result;
use crate::image::{split_channels, BlockGrid, ImageBuf, SubBlockGrid};
use crate::keying::{get_seed, KeySet, Partition, PartitionTable};
use crate::params::WatermarkParams;
use crate::wavelet::dwt2_multilevel;

fn std_normal() -> Normal {
    Normal::standard()
}

/// Smallest green count at which a block of `n` coefficients is declared
/// watermarked at significance `alpha`.
pub fn hypothesis_threshold(n: usize, alpha: f64) -> u32 {
    let z = std_normal().inverse_cdf(1.0 - alpha);
    let n = n as f64;
    (z / 2.0 * n.sqrt() + n / 2.0).ceil() as u32
}

/// One-sided p-value of a (possibly channel-averaged) green count.
pub fn block_pvalue(mean_count: f64, n: usize) -> f64 {
    let n = n as f64;
    let z = (mean_count - n / 2.0) / (n.sqrt() / 2.0);
    1.0 - std_normal().cdf(z)
}

/// Number of level-d LL coefficients in `block` that classify green.
pub fn detect_block(block: &[u8], params: &WatermarkParams, partition: &Partition) -> u32 {
    let m = params.block;
    let k = params.sub_block;
    let subs = SubBlockGrid {
        block_size: m,
        sub_size: k,
    };
    let mut sub = vec![0.0; k * k];
    let mut count = 0;
    for (sy, sx) in subs.origins() {
        for r in 0..k {
            for c in 0..k {
                sub[r * k + c] = f64::from(block[(sy + r) * m + sx + c]);
            }
        }
        let pyr = dwt2_multilevel(&sub, k, params.levels as usize).expect("sub-block size validated");
        count += pyr.ll.iter().filter(|&&v| partition.is_green(v)).count() as u32;
    }
    count
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellScore {
    /// Green count per channel; `None` where entropy gating skipped the channel.
    pub counts: Vec<Option<u32>>,
    /// Index of the key whose counts are reported.
    pub key: usize,
}

impl CellScore {
    pub fn active_channels(&self) -> usize {
        self.counts.iter().flatten().count()
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().flatten().sum()
    }

    pub fn mean(&self) -> Option<f64> {
        let n = self.active_channels();
        (n > 0).then(|| f64::from(self.total()) / n as f64)
    }
}

/// Per-block green counts on one block grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub rows: usize,
    pub cols: usize,
    pub offset: (usize, usize),
    /// Coefficients per block per channel.
    pub coeffs_per_block: usize,
    pub cells: Vec<CellScore>,
}

impl ScoreGrid {
    pub fn cell(&self, row: usize, col: usize) -> &CellScore {
        &self.cells[row * self.cols + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Green,
    Red,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionMap {
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    pub offset: (usize, usize),
    pub cells: Vec<Cell>,
}

impl DetectionMap {
    pub fn get(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.cols + col]
    }

    pub fn count(&self, cell: Cell) -> usize {
        self.cells.iter().filter(|&&c| c == cell).count()
    }

    /// Green cells over non-skipped cells, 0 when every cell was skipped.
    pub fn green_fraction(&self) -> f64 {
        let green = self.count(Cell::Green);
        let scored = green + self.count(Cell::Red);
        if scored == 0 {
            0.0
        } else {
            green as f64 / scored as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Fraction of scored blocks that are green in the raw map.
    pub score: f64,
    pub decision: bool,
    pub tau: f64,
    pub alpha: f64,
    /// Green count at which a block is declared watermarked.
    pub block_threshold: u32,
    /// Post-processed map for display.
    pub map: DetectionMap,
    pub raw_map: DetectionMap,
    pub per_block_pvalues: Vec<Option<f64>>,
    pub scores: ScoreGrid,
    pub crop_offset: Option<(usize, usize)>,
    pub offsets_tested: usize,
}

/// Builds raw and post-processed maps and the global score from block counts.
pub fn evaluate(grid: &ScoreGrid, params: &WatermarkParams, key_count: usize, tau: f64) -> DetectionResult {
    let alpha = params.alpha / key_count as f64;
    let threshold = hypothesis_threshold(grid.coeffs_per_block, alpha);
    let mut cells = Vec::with_capacity(grid.cells.len());
    let mut pvalues = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let active = cell.active_channels() as u32;
        if active == 0 {
            cells.push(Cell::Skipped);
            pvalues.push(None);
            continue;
        }
        // mean >= threshold, kept in integers
        cells.push(if cell.total() >= threshold * active {
            Cell::Green
        } else {
            Cell::Red
        });
        pvalues.push(cell.mean().map(|m| block_pvalue(m, grid.coeffs_per_block)));
    }
    let raw_map = DetectionMap {
        rows: grid.rows,
        cols: grid.cols,
        block_size: params.block,
        offset: grid.offset,
        cells,
    };
    let score = raw_map.green_fraction();
    DetectionResult {
        score,
        decision: score > tau,
        tau,
        alpha: params.alpha,
        block_threshold: threshold,
        map: post_process(&raw_map),
        raw_map,
        per_block_pvalues: pvalues,
        scores: grid.clone(),
        crop_offset: None,
        offsets_tested: 1,
    }
}

/// Counts green coefficients for every block of the grid at `offset`, using
/// the full wavelet transform of every sub-block.
pub fn score_grid(
    img: &ImageBuf,
    params: &WatermarkParams,
    table: &PartitionTable,
    offset: (usize, usize),
) -> Result<ScoreGrid> {
    let grid = BlockGrid::with_offset(img.height(), img.width(), params.block, offset)?;
    let m = params.block;
    let planes = split_channels(img);
    let gates: Vec<Vec<bool>> = planes.iter().map(|p| entropy_gate(p, &grid, params)).collect();
    let positions: Vec<(usize, usize)> = grid.positions().collect();
    let cells = positions
        .par_iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let (y, x) = grid.origin(r, c);
            let blocks: Vec<Option<(Vec<u8>, _)>> = planes
                .iter()
                .zip(&gates)
                .map(|(plane, gate)| {
                    gate[i].then(|| {
                        let b = plane.square(y, x, m);
                        let seed = get_seed(&b, params.round_val);
                        (b, table.get(seed))
                    })
                })
                .collect();
            best_key_cell(table.key_count(), |key| {
                blocks
                    .iter()
                    .map(|slot| slot.as_ref().map(|(b, parts)| detect_block(b, params, &parts[key])))
                    .collect()
            })
        })
        .collect();
    Ok(ScoreGrid {
        rows: grid.rows,
        cols: grid.cols,
        offset,
        coeffs_per_block: params.coeffs_per_block(),
        cells,
    })
}

/// Evaluates every key and keeps the one with the highest total count
/// (lowest index on ties).
pub(crate) fn best_key_cell(key_count: usize, mut counts_for: impl FnMut(usize) -> Vec<Option<u32>>) -> CellScore {
    let mut best = CellScore {
        counts: counts_for(0),
        key: 0,
    };
    for key in 1..key_count {
        let counts = counts_for(key);
        let total: u32 = counts.iter().flatten().sum();
        if total > best.total() {
            best = CellScore { counts, key };
        }
    }
    best
}

pub fn detect_at_offset(
    img: &ImageBuf,
    params: &WatermarkParams,
    keyset: &KeySet,
    tau: f64,
    offset: (usize, usize),
) -> Result<DetectionResult> {
    params.validate()?;
    let table = PartitionTable::new(keyset, params);
    let grid = score_grid(img, params, &table, offset)?;
    Ok(evaluate(&grid, params, keyset.len(), tau))
}

pub fn detect_image(img: &ImageBuf, params: &WatermarkParams, keyset: &KeySet, tau: f64) -> Result<DetectionResult> {
    detect_at_offset(img, params, keyset, tau, (0, 0))
}

/// One non-cascading smoothing pass: an interior cell whose eight neighbours
/// all have the opposite colour takes that colour. Border cells and skipped
/// cells never flip, and a skipped neighbour blocks the flip.
pub fn post_process(map: &DetectionMap) -> DetectionMap {
    let mut out = map.clone();
    if map.rows < 3 || map.cols < 3 {
        return out;
    }
    for r in 1..map.rows - 1 {
        for c in 1..map.cols - 1 {
            let own = map.get(r, c);
            let opposite = match own {
                Cell::Green => Cell::Red,
                Cell::Red => Cell::Green,
                Cell::Skipped => continue,
            };
            let surrounded = (r - 1..=r + 1)
                .flat_map(|rr| (c - 1..=c + 1).map(move |cc| (rr, cc)))
                .filter(|&(rr, cc)| (rr, cc) != (r, c))
                .all(|(rr, cc)| map.get(rr, cc) == opposite);
            if surrounded {
                out.cells[r * map.cols + c] = opposite;
            }
        }
    }
    out
}
