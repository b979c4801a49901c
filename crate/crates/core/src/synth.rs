//! Procedural photo-like test images.
//!
//! Used when no image directory is at hand: each image layers multi-octave
//! value noise (roughly 1/f amplitude spectrum), a smooth illumination
//! gradient, a few flat or shaded shapes and mild sensor grain. Output is a
//! deterministic function of `(seed, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::ImageBuf;

const SIZES: [(usize, usize); 6] = [(480, 640), (640, 480), (384, 512), (432, 576), (512, 512), (360, 480)];

struct ValueNoise {
    cell: f64,
    gw: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Self {
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let grid = (0..gh * gw).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Self { cell, gw, grid }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let fy = y as f64 / self.cell;
        let fx = x as f64 / self.cell;
        let (iy, ix) = (fy as usize, fx as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
        let g = |r: usize, c: usize| self.grid[r * self.gw + c];
        let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
        let bottom = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn fractal(rng: &mut ChaCha8Rng, h: usize, w: usize, base_cell: f64, octaves: usize, persistence: f64) -> Vec<f64> {
    let layers: Vec<(ValueNoise, f64)> = (0..octaves)
        .map(|o| {
            let cell = (base_cell / f64::from(1 << o)).max(1.5);
            (ValueNoise::new(rng, h, w, cell), persistence.powi(o as i32))
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = layers.iter().map(|(n, a)| a * n.at(y, x)).sum();
        }
    }
    out
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }
}

/// One synthetic RGB image.
pub fn synth_image(seed: u64, index: u64) -> ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (h, w) = SIZES[rng.random_range(0..SIZES.len())];

    let base_cell = rng.random_range(40.0..160.0);
    let persistence = rng.random_range(0.65..0.85);
    let luma = fractal(&mut rng, h, w, base_cell, 7, persistence);
    let chroma_a = fractal(&mut rng, h, w, base_cell * 1.5, 4, 0.6);
    let chroma_b = fractal(&mut rng, h, w, base_cell * 1.5, 4, 0.6);

    let palette: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(40.0..220.0)));
    let contrast = rng.random_range(55.0..115.0);
    let tilt = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));

    let n_shapes = rng.random_range(0..6);
    let shapes: Vec<(Shape, [f64; 3], f64)> = (0..n_shapes)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let ry = rng.random_range(20.0..h as f64 / 3.0);
            let rx = rng.random_range(20.0..w as f64 / 3.0);
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    y0: cy - ry,
                    x0: cx - rx,
                    y1: cy + ry,
                    x1: cx + rx,
                }
            } else {
                Shape::Ellipse { cy, cx, ry, rx }
            };
            let colour = std::array::from_fn(|_| rng.random_range(10.0..245.0));
            // 0 gives a flat fill, larger values keep some of the underlying texture
            let texture = if rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.2..0.8)
            };
            (shape, colour, texture)
        })
        .collect();

    let grain = Normal::new(0.0, rng.random_range(0.8..3.0)).expect("positive std");
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let light = 1.0 + tilt.0 * (y as f64 / h as f64 - 0.5) + tilt.1 * (x as f64 / w as f64 - 0.5);
            let t = 0.5 + 0.5 * chroma_a[i].clamp(-1.0, 1.0);
            let u = 0.5 + 0.5 * chroma_b[i].clamp(-1.0, 1.0);
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let base = palette[0][c] * (1.0 - t) * (1.0 - u) + palette[1][c] * t + palette[2][c] * u * (1.0 - t);
                *p = (base + contrast * luma[i]) * light;
            }
            for (shape, colour, texture) in &shapes {
                if shape.contains(y as f64, x as f64) {
                    for (c, p) in px.iter_mut().enumerate() {
                        *p = colour[c] * light + texture * contrast * luma[i];
                    }
                }
            }
            for p in px {
                let v = p + grain.sample(&mut rng);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuf::new(h, w, 3, data).expect("buffer matches dimensions")
}

/// `count` images with ids `synth_0000`, `synth_0001`, ...
pub fn synth_corpus(seed: u64, count: usize) -> Vec<(String, ImageBuf)> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| (format!("synth_{i:04}"), synth_image(seed, i as u64)))
        .collect()
}
