//! Seed-generated downstream datasets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pretext::scenes::{render_depth_scene, render_labeled, SceneConfig};
use crate::pretext::Image;
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    /// Shape classes, at most four.
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Maximum translation, in pixels, applied to training images.
    pub jitter: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            classes: 4,
            train: 256,
            test: 256,
            jitter: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationSet {
    pub classes: usize,
    pub train: Vec<(Image, usize)>,
    pub test: Vec<(Image, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthSet {
    pub train: Vec<(Image, Vec<f64>)>,
    pub test: Vec<(Image, Vec<f64>)>,
}

/// Shape classification: one shape per image, class = shape kind, colors
/// drawn at random so hue carries no label information.
pub fn classification_set(cfg: &DatasetConfig, seed: u64) -> ClassificationSet {
    let scene = SceneConfig {
        size: cfg.image_size,
        ..SceneConfig::default()
    };
    let split = |purpose: &str, count: usize| {
        (0..count)
            .map(|i| {
                let label = i % cfg.classes;
                (render_labeled(&scene, label, &mut stream(seed, purpose, &[i as u64])), label)
            })
            .collect()
    };
    ClassificationSet {
        classes: cfg.classes,
        train: split("eval/classify/train", cfg.train),
        test: split("eval/classify/test", cfg.test),
    }
}

pub fn depth_set(cfg: &DatasetConfig, seed: u64) -> DepthSet {
    let split = |purpose: &str, count: usize| {
        (0..count)
            .map(|i| render_depth_scene(cfg.image_size, &mut stream(seed, purpose, &[i as u64])))
            .collect()
    };
    DepthSet {
        train: split("eval/depth/train", cfg.train),
        test: split("eval/depth/test", cfg.test),
    }
}

/// Shifts content by `(dy, dx)`, replicating edge pixels into the gap.
pub fn translate(image: &Image, dy: isize, dx: isize) -> Image {
    let (h, w) = (image.height as isize, image.width as isize);
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..h {
            for x in 0..w {
                let sy = (y - dy).clamp(0, h - 1) as usize;
                let sx = (x - dx).clamp(0, w - 1) as usize;
                out.set(c, y as usize, x as usize, image.get(c, sy, sx));
            }
        }
    }
    out
}

/// Random translation by up to `jitter` pixels on each axis.
pub fn jitter(image: &Image, jitter: usize, rng: &mut impl Rng) -> Image {
    if jitter == 0 {
        return image.clone();
    }
    let (dy, dx) = random_shift(jitter, rng);
    translate(image, dy, dx)
}

/// Uniform offsets in `-jitter..=jitter` on each axis.
pub fn random_shift(jitter: usize, rng: &mut impl Rng) -> (isize, isize) {
    let j = jitter as i64;
    (rng.random_range(-j..=j) as isize, rng.random_range(-j..=j) as isize)
}

/// Block mean over `factor × factor` cells of a square map.
pub fn downsample_depth(depth: &[f64], size: usize, factor: usize) -> Vec<f64> {
    let out = size / factor;
    let mut res = vec![0.0; out * out];
    for (i, r) in res.iter_mut().enumerate() {
        let (oy, ox) = (i / out, i % out);
        let mut sum = 0.0;
        for y in 0..factor {
            for x in 0..factor {
                sum += depth[(oy * factor + y) * size + ox * factor + x];
            }
        }
        *r = sum / (factor * factor) as f64;
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datasets_are_seeded_and_balanced() {
        let cfg = DatasetConfig {
            image_size: 16,
            train: 8,
            test: 4,
            ..DatasetConfig::default()
        };
        let a = classification_set(&cfg, 1);
        assert_eq!(a, classification_set(&cfg, 1));
        assert_ne!(a, classification_set(&cfg, 2));
        let counts = (0..4).map(|c| a.train.iter().filter(|(_, l)| *l == c).count()).collect::<Vec<_>>();
        assert_eq!(counts, vec![2; 4]);
        let d = depth_set(&cfg, 1);
        assert_eq!(d.test.len(), 4);
        assert!(d.train.iter().all(|(_, depth)| depth.len() == 256 && depth.iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn translate_moves_content() {
        let mut im = Image::filled(1, 3, 3, 0.0);
        im.set(0, 1, 1, 1.0);
        let t = translate(&im, 1, -1);
        assert_eq!(t.get(0, 2, 0), 1.0);
        assert_eq!(t.get(0, 1, 1), 0.0);
        assert_eq!(translate(&im, 0, 0), im);
    }

    #[test]
    fn block_mean() {
        let d: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(downsample_depth(&d, 4, 2), vec![2.5, 4.5, 10.5, 12.5]);
    }
}
