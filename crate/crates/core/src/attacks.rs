//! Deterministic image manipulations for robustness and forensics runs.
//!
//! Every attack is a pure function of the input image and its [`AttackSpec`];
//! randomised attacks draw from a ChaCha stream seeded by `rng_seed`.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{BlockGrid, ImageBuf};
use crate::keying::seed_from_sum;
use crate::params::WatermarkParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeedMode {
    Nearest,
    Higher,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttackKind {
    Jpeg {
        quality: u8,
    },
    GaussianBlur {
        ksize: usize,
        sigma: f64,
    },
    GaussianNoise {
        sigma: f64,
    },
    Brightness {
        factor: f64,
    },
    Contrast {
        factor: f64,
    },
    Rotate90 {
        turns: u8,
    },
    CropRandom {
        keep_fraction: f64,
    },
    SeedAttack {
        mode: SeedMode,
    },
    /// Named learned-codec attacks; recognised but not implemented.
    Codec {
        name: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutput {
    pub image: ImageBuf,
    /// Top-left corner of the kept window for crops.
    pub crop_offset: Option<(usize, usize)>,
}

fn fmt_real(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::Jpeg { quality } => write!(f, "jpeg:{quality}"),
            AttackKind::GaussianBlur { ksize, sigma } => write!(f, "blur:{ksize},{}", fmt_real(*sigma)),
            AttackKind::GaussianNoise { sigma } => write!(f, "noise:{}", fmt_real(*sigma)),
            AttackKind::Brightness { factor } => write!(f, "brightness:{}", fmt_real(*factor)),
            AttackKind::Contrast { factor } => write!(f, "contrast:{}", fmt_real(*factor)),
            AttackKind::Rotate90 { turns: 1 } => write!(f, "rotate90"),
            AttackKind::Rotate90 { turns } => write!(f, "rotate90:{turns}"),
            AttackKind::CropRandom { keep_fraction } => write!(f, "crop:{}", fmt_real(*keep_fraction)),
            AttackKind::SeedAttack { mode } => {
                let m = match mode {
                    SeedMode::Nearest => "nearest",
                    SeedMode::Higher => "higher",
                    SeedMode::Lower => "lower",
                };
                write!(f, "seed:{m}")
            }
            AttackKind::Codec { name } => write!(f, "{name}"),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kind.fmt(f)
    }
}

const CODECS: [&str; 2] = ["bmshj18", "cheng20"];

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidAttack {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let real = |a: &str| a.trim().parse::<f64>().ok().filter(|v| v.is_finite());
        let one_real = || args.and_then(real).ok_or_else(|| bad("expected one number"));
        let kind = match name.to_ascii_lowercase().as_str() {
            "jpeg" => {
                let quality = args
                    .and_then(|a| a.parse::<u8>().ok())
                    .filter(|q| (1..=100).contains(q))
                    .ok_or_else(|| bad("quality must be an integer in 1..=100"))?;
                AttackKind::Jpeg { quality }
            }
            "blur" => {
                let (k, sg) = args
                    .and_then(|a| a.split_once(','))
                    .ok_or_else(|| bad("expected ksize,sigma"))?;
                let ksize = k
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| bad("kernel size must be an integer"))?;
                let sigma = real(sg).ok_or_else(|| bad("sigma must be a number"))?;
                if ksize % 2 == 0 {
                    return Err(bad("kernel size must be odd"));
                }
                if sigma <= 0.0 {
                    return Err(bad("sigma must be positive"));
                }
                AttackKind::GaussianBlur { ksize, sigma }
            }
            "noise" => {
                let sigma = one_real()?;
                if sigma < 0.0 {
                    return Err(bad("sigma must be non-negative"));
                }
                AttackKind::GaussianNoise { sigma }
            }
            "brightness" | "contrast" => {
                let factor = one_real()?;
                if factor < 0.0 {
                    return Err(bad("factor must be non-negative"));
                }
                if name.eq_ignore_ascii_case("brightness") {
                    AttackKind::Brightness { factor }
                } else {
                    AttackKind::Contrast { factor }
                }
            }
            "rotate90" => {
                let turns = match args {
                    None => 1,
                    Some(a) => a
                        .parse::<u8>()
                        .ok()
                        .filter(|t| (1..=3).contains(t))
                        .ok_or_else(|| bad("turns must be 1, 2 or 3"))?,
                };
                AttackKind::Rotate90 { turns }
            }
            "crop" => {
                let keep_fraction = one_real()?;
                if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
                    return Err(bad("keep fraction must lie in (0, 1]"));
                }
                AttackKind::CropRandom { keep_fraction }
            }
            "seed" => {
                let mode = match args.map(str::to_ascii_lowercase).as_deref() {
                    Some("nearest") | None => SeedMode::Nearest,
                    Some("higher") => SeedMode::Higher,
                    Some("lower") => SeedMode::Lower,
                    Some(_) => return Err(bad("mode must be nearest, higher or lower")),
                };
                AttackKind::SeedAttack { mode }
            }
            n if CODECS.contains(&n) => AttackKind::Codec { name: n.to_string() },
            _ => return Err(bad("unknown attack")),
        };
        Ok(kind)
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(AttackSpec {
            kind: s.parse()?,
            rng_seed: 0,
        })
    }
}

impl AttackSpec {
    pub fn new(kind: AttackKind, rng_seed: u64) -> Self {
        Self { kind, rng_seed }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            kind: self.kind.clone(),
            rng_seed,
        }
    }

    /// Seed attacks need the block grid; everything else ignores `params`.
    pub fn apply(&self, img: &ImageBuf, params: &WatermarkParams) -> Result<AttackOutput> {
        let plain = |image| {
            Ok(AttackOutput {
                image,
                crop_offset: None,
            })
        };
        match &self.kind {
            AttackKind::Jpeg { quality } => plain(jpeg(img, *quality)?),
            AttackKind::GaussianBlur { ksize, sigma } => plain(gaussian_blur(img, *ksize, *sigma)?),
            AttackKind::GaussianNoise { sigma } => plain(gaussian_noise(img, *sigma, self.rng_seed)?),
            AttackKind::Brightness { factor } => plain(brightness(img, *factor)),
            AttackKind::Contrast { factor } => plain(contrast(img, *factor)),
            AttackKind::Rotate90 { turns } => plain(rotate90(img, *turns)),
            AttackKind::CropRandom { keep_fraction } => {
                let (image, offset) = crop_random(img, *keep_fraction, self.rng_seed)?;
                Ok(AttackOutput {
                    image,
                    crop_offset: Some(offset),
                })
            }
            AttackKind::SeedAttack { mode } => plain(seed_attack(img, params, *mode)?),
            AttackKind::Codec { name } => Err(Error::UnsupportedAttack(name.clone())),
        }
    }
}

/// Per-item RNG seed derived from a master seed and an identifier, so results
/// do not depend on processing order.
pub fn derive_seed(master: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn jpeg(img: &ImageBuf, quality: u8) -> Result<ImageBuf> {
    let mut bytes = Vec::new();
    let encoder = JpegEncoder::new_with_quality(&mut bytes, quality.clamp(1, 100));
    img.to_dynamic().write_with_encoder(encoder)?;
    let decoded = image::load(Cursor::new(bytes), ImageFormat::Jpeg)?;
    let mut out = ImageBuf::from_dynamic(decoded);
    if out.channels() != img.channels() {
        out = ImageBuf::new(
            img.height(),
            img.width(),
            img.channels(),
            match img.channels() {
                1 => out.luma().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
                _ => out.to_rgb().into_raw(),
            },
        )?;
    }
    Ok(out)
}

fn gaussian_kernel(ksize: usize, sigma: f64) -> Vec<f64> {
    let half = (ksize / 2) as f64;
    let raw: Vec<f64> = (0..ksize)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn gaussian_blur(img: &ImageBuf, ksize: usize, sigma: f64) -> Result<ImageBuf> {
    if ksize.is_multiple_of(2) || sigma <= 0.0 {
        return Err(Error::InvalidAttack {
            spec: format!("blur:{ksize},{sigma}"),
            reason: "kernel size must be odd and sigma positive".into(),
        });
    }
    if ksize == 1 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(ksize, sigma);
    let half = (ksize / 2) as isize;
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let xx = clampi(x as isize + i as isize - half, w);
                    acc += kv * f64::from(src[(y * w + xx) * ch + c]);
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let yy = clampi(y as isize + i as isize - half, h);
                    acc += kv * tmp[(yy * w + x) * ch + c];
                }
                out.push(to_u8(acc));
            }
        }
    }
    ImageBuf::new(h, w, ch, out)
}

/// Adds i.i.d. N(0, (255·sigma)²) noise; `sigma` is on the [0, 1] scale.
pub fn gaussian_noise(img: &ImageBuf, sigma: f64, rng_seed: u64) -> Result<ImageBuf> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let dist = Normal::new(0.0, 255.0 * sigma).map_err(|e| Error::InvalidAttack {
        spec: format!("noise:{sigma}"),
        reason: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let data = img
        .data()
        .iter()
        .map(|&v| to_u8(f64::from(v) + dist.sample(&mut rng)))
        .collect();
    ImageBuf::new(img.height(), img.width(), img.channels(), data)
}

pub fn brightness(img: &ImageBuf, factor: f64) -> ImageBuf {
    let data = img.data().iter().map(|&v| to_u8(factor * f64::from(v))).collect();
    ImageBuf::new(img.height(), img.width(), img.channels(), data).expect("same shape")
}

pub fn contrast(img: &ImageBuf, factor: f64) -> ImageBuf {
    let luma = img.luma();
    let mean = luma.iter().sum::<f64>() / luma.len().max(1) as f64;
    let data = img
        .data()
        .iter()
        .map(|&v| to_u8(mean + factor * (f64::from(v) - mean)))
        .collect();
    ImageBuf::new(img.height(), img.width(), img.channels(), data).expect("same shape")
}

/// Counter-clockwise quarter turns.
pub fn rotate90(img: &ImageBuf, turns: u8) -> ImageBuf {
    let mut cur = img.clone();
    for _ in 0..turns % 4 {
        let (h, w, ch) = (cur.height(), cur.width(), cur.channels());
        let next = ImageBuf::from_fn(w, h, ch, |i, j, c| cur.get(j, w - 1 - i, c)).expect("same channels");
        cur = next;
    }
    cur
}

/// Keeps a uniformly placed window of `keep_fraction` of the area with the
/// input's aspect ratio. Returns the window and its top-left corner.
pub fn crop_random(img: &ImageBuf, keep_fraction: f64, rng_seed: u64) -> Result<(ImageBuf, (usize, usize))> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidAttack {
            spec: format!("crop:{keep_fraction}"),
            reason: "keep fraction must lie in (0, 1]".into(),
        });
    }
    let s = keep_fraction.sqrt();
    let ch = ((img.height() as f64 * s).round() as usize).clamp(1, img.height());
    let cw = ((img.width() as f64 * s).round() as usize).clamp(1, img.width());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let y0 = rng.random_range(0..=img.height() - ch);
    let x0 = rng.random_range(0..=img.width() - cw);
    Ok((img.crop(y0, x0, ch, cw)?, (y0, x0)))
}

/// Overwrites the rectangle at `position` with `patch`.
pub fn splice_insert(dst: &ImageBuf, patch: &ImageBuf, position: (usize, usize)) -> Result<ImageBuf> {
    let (y0, x0) = position;
    if patch.channels() != dst.channels() {
        return Err(Error::Dimension(format!(
            "patch has {} channels, image has {}",
            patch.channels(),
            dst.channels()
        )));
    }
    if y0 + patch.height() > dst.height() || x0 + patch.width() > dst.width() {
        return Err(Error::Dimension(format!(
            "{}x{} patch at ({y0}, {x0}) exceeds {}x{} image",
            patch.height(),
            patch.width(),
            dst.height(),
            dst.width()
        )));
    }
    let mut out = dst.clone();
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            for c in 0..dst.channels() {
                out.set(y0 + y, x0 + x, c, patch.get(y, x, c));
            }
        }
    }
    Ok(out)
}

fn shifted_sum(hist: &[u64; 256], delta: i32) -> u64 {
    hist.iter()
        .enumerate()
        .map(|(v, &n)| n * (v as i32 + delta).clamp(0, 255) as u64)
        .sum()
}

/// Smallest per-pixel offset in direction `sign` that changes the block seed.
fn seed_crossing(hist: &[u64; 256], count: u64, round_val: u32, sign: i32) -> Option<i32> {
    let base = seed_from_sum(shifted_sum(hist, 0), count, round_val);
    (1..=255)
        .map(|d| d * sign)
        .find(|&d| seed_from_sum(shifted_sum(hist, d), count, round_val) != base)
}

/// Offset added to one block by [`seed_attack`], or `None` if no offset changes
/// the seed.
pub fn seed_attack_offset(block: &[u8], round_val: u32, mode: SeedMode) -> Option<i32> {
    let mut hist = [0u64; 256];
    for &v in block {
        hist[v as usize] += 1;
    }
    let n = block.len() as u64;
    let up = || seed_crossing(&hist, n, round_val, 1);
    let down = || seed_crossing(&hist, n, round_val, -1);
    match mode {
        SeedMode::Higher => up().or_else(down),
        SeedMode::Lower => down().or_else(up),
        SeedMode::Nearest => match (up(), down()) {
            (Some(u), Some(d)) => Some(if u <= -d { u } else { d }),
            (u, d) => u.or(d),
        },
    }
}

/// Shifts every block of every channel by the constant offset that moves its
/// seed into a neighbouring bucket.
pub fn seed_attack(img: &ImageBuf, params: &WatermarkParams, mode: SeedMode) -> Result<ImageBuf> {
    let m = params.block;
    let grid = BlockGrid::new(img.height(), img.width(), m)?;
    let mut out = img.clone();
    for c in 0..img.channels() {
        let plane = img.channel_plane(c);
        for (r, col) in grid.positions() {
            let (y, x) = grid.origin(r, col);
            let block = plane.square(y, x, m);
            if let Some(delta) = seed_attack_offset(&block, params.round_val, mode) {
                for yy in 0..m {
                    for xx in 0..m {
                        let v = i32::from(block[yy * m + xx]) + delta;
                        out.set(y + yy, x + xx, c, v.clamp(0, 255) as u8);
                    }
                }
            }
        }
    }
    Ok(out)
}
