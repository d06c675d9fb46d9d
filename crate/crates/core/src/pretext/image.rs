use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;

use super::PretextError;

/// Planar (channel-major) image with `f64` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    /// Sub-image with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut out = Image::filled(self.channels, height, width, 0.0);
        for c in 0..self.channels {
            for y in 0..height {
                let src = self.index(c, top + y, left);
                let dst = out.index(c, y, 0);
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image::new(self.channels, self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Stacks same-shape images into a `[n, c, h, w]` tensor.
pub fn stack(images: &[Image]) -> Tensor {
    let first = images.first().expect("at least one image");
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        assert_eq!(im.shape(), first.shape(), "stacked images must share a shape");
        data.extend_from_slice(&im.data);
    }
    Tensor::new(vec![images.len(), first.channels, first.height, first.width], data).expect("non-empty")
}

pub const RASTER_MAGIC: &[u8; 4] = b"MTRS";

/// Writes `MTRS | width u32 | height u32 | channels u32 | f32 samples`
/// (little-endian, planar).
pub fn write_raster(path: &Path, image: &Image) -> Result<(), PretextError> {
    let mut out = Vec::with_capacity(16 + image.data.len() * 4);
    out.extend_from_slice(RASTER_MAGIC);
    for d in [image.width, image.height, image.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &image.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Image, PretextError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_raster(&bytes).map_err(|detail| PretextError::Raster {
        path: path.display().to_string(),
        detail,
    })
}

pub fn decode_raster(bytes: &[u8]) -> Result<Image, String> {
    if bytes.len() < 16 || &bytes[..4] != RASTER_MAGIC {
        return Err("missing MTRS header".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    if w == 0 || h == 0 || c == 0 {
        return Err(format!("degenerate extents {w}x{h}x{c}"));
    }
    let body = &bytes[16..];
    if body.len() != w * h * c * 4 {
        return Err(format!("expected {} sample bytes, found {}", w * h * c * 4, body.len()));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Image::new(c, h, w, data))
}
