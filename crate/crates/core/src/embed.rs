//! Watermark embedding.
//!
//! For every m×m block of every channel: derive the seed from the block mean,
//! build the partition for the block's key, then move every red level-d LL
//! coefficient of each k×k sub-block to the centre of the nearest green
//! interval. Blocks are re-quantised once, after all sub-blocks are done.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{quantize_pixels, split_channels, BlockGrid, ChannelPlane, ImageBuf, SubBlockGrid};
use crate::keying::{get_seed, KeySet, Partition, PartitionTable};
use crate::params::WatermarkParams;
use crate::wavelet::{dwt2_multilevel, idwt2_multilevel, set_ll_coefficients};

/// Shannon entropy (bits) of a 256-bin intensity histogram.
pub fn entropy_from_histogram(hist: &[u32; 256], total: u32) -> f64 {
    let n = f64::from(total);
    let mut h = 0.0;
    for &count in hist {
        if count > 0 {
            let p = f64::from(count) / n;
            h -= p * p.log2();
        }
    }
    h
}

pub fn block_entropy(block: &[u8]) -> f64 {
    let mut hist = [0u32; 256];
    for &v in block {
        hist[v as usize] += 1;
    }
    entropy_from_histogram(&hist, block.len() as u32)
}

/// Percentile of `entropies` (lower of the two middles for the median of an
/// even count).
pub fn entropy_threshold(entropies: &[f64], percentile: f64) -> f64 {
    assert!(!entropies.is_empty(), "entropy threshold of no blocks");
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank.min(sorted.len()) - 1]
}

/// Entropy gate for every block of one channel: `true` means the block is
/// processed. All blocks pass when entropy gating is disabled.
pub fn entropy_gate(plane: &ChannelPlane, grid: &BlockGrid, params: &WatermarkParams) -> Vec<bool> {
    if !params.entropy_adaptive {
        return vec![true; grid.len()];
    }
    let m = grid.block_size;
    let entropies: Vec<f64> = grid
        .positions()
        .map(|(r, c)| {
            let (y, x) = grid.origin(r, c);
            block_entropy(&plane.square(y, x, m))
        })
        .collect();
    let threshold = entropy_threshold(&entropies, params.entropy_percentile);
    entropies.iter().map(|&h| h > threshold).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub coefficients_perturbed: u64,
    pub coefficients_capped: u64,
    pub pixels_clamped: u64,
    pub abs_coeff_shift: f64,
}

impl BlockStats {
    fn merge(&mut self, other: &BlockStats) {
        self.coefficients_perturbed += other.coefficients_perturbed;
        self.coefficients_capped += other.coefficients_capped;
        self.pixels_clamped += other.pixels_clamped;
        self.abs_coeff_shift += other.abs_coeff_shift;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub blocks_embedded: u64,
    pub blocks_skipped_entropy: u64,
    pub coefficients_perturbed: u64,
    /// Red coefficients with no green interval in reach, left unchanged.
    pub coefficients_capped: u64,
    pub pixels_clamped: u64,
    pub mean_abs_coeff_shift: f64,
}

/// Embeds into one block and returns the real-valued result before
/// quantisation, or `None` if no coefficient had to move.
pub fn embed_block_unquantized(
    block: &[u8],
    params: &WatermarkParams,
    partition: &Partition,
) -> (Option<Vec<f64>>, BlockStats) {
    let m = params.block;
    let k = params.sub_block;
    let levels = params.levels as usize;
    let subs = SubBlockGrid {
        block_size: m,
        sub_size: k,
    };
    let mut stats = BlockStats::default();
    let mut out: Option<Vec<f64>> = None;
    let mut sub = vec![0.0; k * k];
    for (sy, sx) in subs.origins() {
        for r in 0..k {
            for c in 0..k {
                sub[r * k + c] = f64::from(block[(sy + r) * m + sx + c]);
            }
        }
        let pyr = dwt2_multilevel(&sub, k, levels).expect("sub-block size validated");
        let mut ll = pyr.ll.clone();
        let mut changed = false;
        for coeff in ll.iter_mut() {
            if partition.is_green(*coeff) {
                continue;
            }
            match partition.nearest_green_target(*coeff, params.max_perturb_intervals) {
                Some(target) => {
                    stats.coefficients_perturbed += 1;
                    stats.abs_coeff_shift += (target - *coeff).abs();
                    *coeff = target;
                    changed = true;
                }
                None => stats.coefficients_capped += 1,
            }
        }
        if !changed {
            continue;
        }
        let rebuilt = idwt2_multilevel(&set_ll_coefficients(&pyr, &ll).expect("same LL shape"));
        let dst = out.get_or_insert_with(|| block.iter().map(|&v| f64::from(v)).collect());
        for r in 0..k {
            dst[(sy + r) * m + sx..(sy + r) * m + sx + k].copy_from_slice(&rebuilt[r * k..(r + 1) * k]);
        }
    }
    (out, stats)
}

/// Embeds into one m×m block, returning the quantised block.
pub fn embed_block(block: &[u8], params: &WatermarkParams, partition: &Partition) -> (Vec<u8>, BlockStats) {
    let (real, mut stats) = embed_block_unquantized(block, params, partition);
    match real {
        None => (block.to_vec(), stats),
        Some(values) => {
            let (q, clamped) = quantize_pixels(&values);
            stats.pixels_clamped = clamped as u64;
            (q, stats)
        }
    }
}

pub fn embed_image(img: &ImageBuf, params: &WatermarkParams, keyset: &KeySet) -> Result<(ImageBuf, EmbedReport)> {
    params.validate()?;
    let table = PartitionTable::new(keyset, params);
    embed_image_with(img, params, &table)
}

pub(crate) fn embed_image_with(
    img: &ImageBuf,
    params: &WatermarkParams,
    table: &PartitionTable,
) -> Result<(ImageBuf, EmbedReport)> {
    let grid = BlockGrid::new(img.height(), img.width(), params.block)?;
    let m = params.block;
    let mut planes = split_channels(img);
    let mut report = EmbedReport::default();
    let mut totals = BlockStats::default();

    for plane in planes.iter_mut() {
        let gate = entropy_gate(plane, &grid, params);
        let plane_ref: &ChannelPlane = plane;
        let results: Vec<Option<(Vec<u8>, BlockStats)>> = grid
            .positions()
            .collect::<Vec<_>>()
            .into_par_iter()
            .enumerate()
            .map(|(i, (r, c))| {
                if !gate[i] {
                    return None;
                }
                let key = table.keyset().select(r, c);
                let (y, x) = grid.origin(r, c);
                let block = plane_ref.square(y, x, m);
                let seed = get_seed(&block, params.round_val);
                let parts = table.get(seed);
                Some(embed_block(&block, params, &parts[key]))
            })
            .collect();
        for ((r, c), res) in grid.positions().zip(results) {
            match res {
                None => report.blocks_skipped_entropy += 1,
                Some((data, stats)) => {
                    report.blocks_embedded += 1;
                    totals.merge(&stats);
                    let (y, x) = grid.origin(r, c);
                    plane.write_square(y, x, m, &data);
                }
            }
        }
    }

    report.coefficients_perturbed = totals.coefficients_perturbed;
    report.coefficients_capped = totals.coefficients_capped;
    report.pixels_clamped = totals.pixels_clamped;
    report.mean_abs_coeff_shift = if totals.coefficients_perturbed > 0 {
        totals.abs_coeff_shift / totals.coefficients_perturbed as f64
    } else {
        0.0
    };
    let out = crate::image::merge_channels(&planes)?;
    Ok((out, report))
}
