use image::RgbImage;

use super::{Cell, DetectionMap};
use crate::image::ImageBuf;

const ALPHA: f64 = 0.35;
const GREEN: [u8; 3] = [0, 255, 0];
const RED: [u8; 3] = [255, 0, 0];
const GRID: [u8; 3] = [255, 255, 255];

/// Tints each scored block of `img` green or red. Skipped blocks and pixels
/// outside the grid keep their colour.
pub fn render_overlay(img: &ImageBuf, map: &DetectionMap, grid_lines: bool) -> RgbImage {
    let rgb = img.to_rgb().into_raw();
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    let m = map.block_size;
    let (oy, ox) = map.offset;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let base = (y * img.width() + x) * 3;
            let mut px = [rgb[base], rgb[base + 1], rgb[base + 2]];
            let inside = y >= oy && x >= ox && (y - oy) / m < map.rows && (x - ox) / m < map.cols;
            if inside {
                let (r, c) = ((y - oy) / m, (x - ox) / m);
                let tint = match map.get(r, c) {
                    Cell::Green => Some(GREEN),
                    Cell::Red => Some(RED),
                    Cell::Skipped => None,
                };
                if let Some(t) = tint {
                    for (p, t) in px.iter_mut().zip(t) {
                        *p = ((1.0 - ALPHA) * f64::from(*p) + ALPHA * f64::from(t)).round() as u8;
                    }
                }
                if grid_lines && ((y - oy) % m == 0 || (x - ox) % m == 0) {
                    px = GRID;
                }
            }
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}
