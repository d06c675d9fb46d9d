//! Exemplar triplets: two augmentations of one source patch plus a patch
//! from a different image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, PretextError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub patch: usize,
    /// Max translation in pixels along each axis.
    pub translate: f64,
    /// Max rotation in radians (either direction).
    pub rotate: f64,
    /// Scale factor drawn from `[1 - scale, 1 + scale]`.
    pub scale: f64,
    /// Per-channel additive shift drawn from `[-color_shift, color_shift]`.
    pub color_shift: f64,
    /// Draw one shift for all channels, so gray inputs stay gray.
    pub gray_shift: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            translate: 1.5,
            rotate: 0.35,
            scale: 0.15,
            color_shift: 0.1,
            gray_shift: false,
        }
    }
}

impl AugmentConfig {
    pub fn identity(patch: usize) -> Self {
        Self {
            patch,
            translate: 0.0,
            rotate: 0.0,
            scale: 0.0,
            color_shift: 0.0,
            gray_shift: false,
        }
    }
}

/// Concrete augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub dx: f64,
    pub dy: f64,
    pub angle: f64,
    pub scale: f64,
    pub shift: [f64; 3],
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        dx: 0.0,
        dy: 0.0,
        angle: 0.0,
        scale: 1.0,
        shift: [0.0; 3],
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let dx = sym(cfg.translate);
        let dy = sym(cfg.translate);
        let angle = sym(cfg.rotate);
        let scale = 1.0 + sym(cfg.scale);
        let shift = if cfg.gray_shift {
            [sym(cfg.color_shift); 3]
        } else {
            [sym(cfg.color_shift), sym(cfg.color_shift), sym(cfg.color_shift)]
        };
        Self {
            dx,
            dy,
            angle,
            scale,
            shift,
        }
    }
}

fn bilinear(image: &Image, c: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (image.height - 1) as f64);
    let x = x.clamp(0.0, (image.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(image.height - 1), (x0 + 1).min(image.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
    let bottom = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Samples a `patch x patch` window centered at `(cy, cx)` under `t`.
pub fn warp_patch(image: &Image, cy: f64, cx: f64, patch: usize, t: &Transform) -> Image {
    let half = (patch as f64 - 1.0) / 2.0;
    let (sin, cos) = t.angle.sin_cos();
    let mut out = Image::filled(image.channels, patch, patch, 0.0);
    for i in 0..patch {
        for j in 0..patch {
            let (u, v) = (j as f64 - half, i as f64 - half);
            let sx = cx + t.dx + t.scale * (cos * u - sin * v);
            let sy = cy + t.dy + t.scale * (sin * u + cos * v);
            for c in 0..image.channels {
                let shift = t.shift.get(c).copied().unwrap_or(0.0);
                let mut val = bilinear(image, c, sy, sx);
                if shift != 0.0 {
                    val = (val + shift).clamp(0.0, 1.0);
                }
                out.set(c, i, j, val);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub anchor: Vec<Image>,
    pub positive: Vec<Image>,
    pub negative: Vec<Image>,
    pub anchor_source: Vec<usize>,
    pub negative_source: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }
}

fn random_center(image: &Image, patch: usize, rng: &mut impl Rng) -> (f64, f64) {
    let half = (patch as f64 - 1.0) / 2.0;
    let top = rng.random_range(0..=image.height - patch) as f64;
    let left = rng.random_range(0..=image.width - patch) as f64;
    (top + half, left + half)
}

pub fn exemplar_triplet_batch(
    images: &[Image],
    cfg: &AugmentConfig,
    count: usize,
    rng: &mut impl Rng,
) -> Result<TripletBatch, PretextError> {
    if images.len() < 2 {
        return Err(PretextError::TooFewImages(images.len()));
    }
    if let Some(im) = images.iter().find(|im| im.height < cfg.patch || im.width < cfg.patch) {
        return Err(PretextError::ImageTooSmall {
            height: im.height,
            width: im.width,
            detail: format!("exemplar patch is {}px", cfg.patch),
        });
    }
    let mut batch = TripletBatch {
        anchor: Vec::with_capacity(count),
        positive: Vec::with_capacity(count),
        negative: Vec::with_capacity(count),
        anchor_source: Vec::with_capacity(count),
        negative_source: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let src = rng.random_range(0..images.len());
        let mut neg = rng.random_range(0..images.len() - 1);
        if neg >= src {
            neg += 1;
        }
        let (cy, cx) = random_center(&images[src], cfg.patch, rng);
        let t1 = Transform::sample(cfg, rng);
        let t2 = Transform::sample(cfg, rng);
        let (ny, nx) = random_center(&images[neg], cfg.patch, rng);
        let t3 = Transform::sample(cfg, rng);
        batch.anchor.push(warp_patch(&images[src], cy, cx, cfg.patch, &t1));
        batch.positive.push(warp_patch(&images[src], cy, cx, cfg.patch, &t2));
        batch.negative.push(warp_patch(&images[neg], ny, nx, cfg.patch, &t3));
        batch.anchor_source.push(src);
        batch.negative_source.push(neg);
    }
    Ok(batch)
}
