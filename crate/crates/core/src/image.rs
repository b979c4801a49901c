//! Image buffers, channel planes and the block grid shared by the embedder and detector.
//!
//! Everything is 8-bit and row-major. Colour images are interleaved RGB; the
//! embedder and detector work on one channel plane at a time.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

/// h × w × c grid of 8-bit intensities, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuf {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedChannels(channels));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "buffer of {} bytes does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copies the rectangle starting at `(y0, x0)` into a new image.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Self::new(height, width, c, data)
    }

    /// ITU-R BT.601 luma as real values, used by SSIM and the contrast attack.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| f64::from(v)).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect()
    }

    pub fn to_rgb(&self) -> RgbImage {
        let data = if self.channels == 3 {
            self.data.clone()
        } else {
            self.data.iter().flat_map(|&v| [v, v, v]).collect()
        };
        RgbImage::from_raw(self.width as u32, self.height as u32, data).expect("buffer length matches dimensions")
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        if self.channels == 1 {
            let g = GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length matches dimensions");
            DynamicImage::ImageLuma8(g)
        } else {
            DynamicImage::ImageRgb8(self.to_rgb())
        }
    }

    /// Converts a decoded image to the canonical form: alpha stripped, 8-bit,
    /// single channel for grayscale sources and RGB otherwise.
    pub fn from_dynamic(img: DynamicImage) -> Self {
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
        );
        if gray {
            let g = img.into_luma8();
            let (w, h) = g.dimensions();
            Self {
                height: h as usize,
                width: w as usize,
                channels: 1,
                data: g.into_raw(),
            }
        } else {
            let rgb = img.into_rgb8();
            let (w, h) = rgb.dimensions();
            Self {
                height: h as usize,
                width: w as usize,
                channels: 3,
                data: rgb.into_raw(),
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::ImageReader::open(path.as_ref())?
            .with_guessed_format()?
            .decode()?;
        Ok(Self::from_dynamic(img))
    }

    /// Writes a lossless PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_dynamic()
            .save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// Writes a baseline JPEG at the given quality.
    pub fn save_jpeg(&self, path: impl AsRef<Path>, quality: u8) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(file, quality.clamp(1, 100));
        self.to_dynamic().write_with_encoder(encoder)?;
        Ok(())
    }

    pub fn channel_plane(&self, c: usize) -> ChannelPlane {
        let data = if self.channels == 1 {
            self.data.clone()
        } else {
            self.data.iter().skip(c).step_by(self.channels).copied().collect()
        };
        ChannelPlane {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// One colour channel of an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ChannelPlane {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Copies the `size`×`size` square at `(y0, x0)`.
    pub fn square(&self, y0: usize, x0: usize, size: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            let start = y * self.width + x0;
            out.extend_from_slice(&self.data[start..start + size]);
        }
        out
    }

    pub fn write_square(&mut self, y0: usize, x0: usize, size: usize, values: &[u8]) {
        for (r, row) in values.chunks_exact(size).enumerate() {
            let start = (y0 + r) * self.width + x0;
            self.data[start..start + size].copy_from_slice(row);
        }
    }
}

pub fn split_channels(img: &ImageBuf) -> Vec<ChannelPlane> {
    (0..img.channels()).map(|c| img.channel_plane(c)).collect()
}

pub fn merge_channels(planes: &[ChannelPlane]) -> Result<ImageBuf> {
    let first = planes
        .first()
        .ok_or_else(|| Error::Dimension("no channel planes to merge".into()))?;
    let (h, w) = (first.height, first.width);
    if planes.iter().any(|p| p.height != h || p.width != w) {
        return Err(Error::Dimension("channel planes differ in size".into()));
    }
    let c = planes.len();
    let mut data = vec![0u8; h * w * c];
    for (ci, plane) in planes.iter().enumerate() {
        for (i, &v) in plane.data.iter().enumerate() {
            data[i * c + ci] = v;
        }
    }
    ImageBuf::new(h, w, c, data)
}

/// Grid of complete m×m blocks, optionally shifted by an origin offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub offset: (usize, usize),
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, block_size: usize) -> Result<Self> {
        Self::with_offset(height, width, block_size, (0, 0))
    }

    pub fn with_offset(height: usize, width: usize, block_size: usize, offset: (usize, usize)) -> Result<Self> {
        let (dy, dx) = offset;
        if block_size == 0 || dy >= block_size.max(1) || dx >= block_size.max(1) {
            return Err(Error::InvalidParams(format!(
                "offset ({dy}, {dx}) must lie in [0, {block_size})"
            )));
        }
        let rows = height.saturating_sub(dy) / block_size;
        let cols = width.saturating_sub(dx) / block_size;
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyGrid {
                height,
                width,
                block: block_size,
                dy,
                dx,
            });
        }
        Ok(Self {
            block_size,
            rows,
            cols,
            offset,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left pixel of block `(row, col)`.
    #[inline]
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (
            self.offset.0 + row * self.block_size,
            self.offset.1 + col * self.block_size,
        )
    }

    /// Block positions in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| (r, c)))
    }
}

/// Square m×m block of one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub size: usize,
    pub data: Vec<u8>,
}

/// Yields every complete block of `plane` under `grid`, row-major.
pub fn block_iter<'a>(
    plane: &'a ChannelPlane,
    grid: &'a BlockGrid,
) -> impl Iterator<Item = (usize, usize, Block)> + 'a {
    grid.positions().map(move |(r, c)| {
        let (y, x) = grid.origin(r, c);
        let m = grid.block_size;
        (
            r,
            c,
            Block {
                size: m,
                data: plane.square(y, x, m),
            },
        )
    })
}

/// Per-block layout of k×k sub-blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubBlockGrid {
    pub block_size: usize,
    pub sub_size: usize,
}

impl SubBlockGrid {
    pub fn new(block_size: usize, sub_size: usize, levels: u32) -> Result<Self> {
        if sub_size == 0 || !block_size.is_multiple_of(sub_size) {
            return Err(Error::InvalidParams(format!(
                "block size {block_size} is not a multiple of sub-block size {sub_size}"
            )));
        }
        if sub_size < (1usize << levels) {
            return Err(Error::InvalidParams(format!(
                "sub-block size {sub_size} is smaller than 2^{levels}"
            )));
        }
        Ok(Self { block_size, sub_size })
    }

    pub fn per_axis(&self) -> usize {
        self.block_size / self.sub_size
    }

    /// Top-left offsets of every sub-block inside a block, row-major.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.per_axis();
        let k = self.sub_size;
        (0..n).flat_map(move |r| (0..n).map(move |c| (r * k, c * k)))
    }
}

/// Rounds half to even, then clamps to [0, 255]. Returns the bytes and the
/// number of samples that had to be clamped.
pub fn quantize_pixels(values: &[f64]) -> (Vec<u8>, usize) {
    let mut clamped = 0;
    let out = values
        .iter()
        .map(|&v| {
            let r = v.round_ties_even();
            if r < 0.0 {
                clamped += 1;
                0
            } else if r > 255.0 {
                clamped += 1;
                255
            } else {
                r as u8
            }
        })
        .collect();
    (out, clamped)
}

pub fn block_mean(block: &[u8]) -> f64 {
    assert!(!block.is_empty(), "mean of an empty block");
    let sum: u64 = block.iter().map(|&v| u64::from(v)).sum();
    sum as f64 / block.len() as f64
}
