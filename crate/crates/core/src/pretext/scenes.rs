//! Procedural scenes used as the unlabeled image source and as the
//! downstream benchmarks.
//!
//! Pre-training scenes contain a few shapes on a textured gradient. Each
//! shape kind carries a characteristic hue, so color is predictable from
//! form. Benchmark images contain one shape with an arbitrary color, and
//! the class is the shape kind.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::color::{lab_pixel_to_rgb, rgb_pixel_to_lab};
use super::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring];

    /// Typical `(a, b)` chroma of this kind in pre-training scenes.
    pub fn chroma(self) -> [f64; 2] {
        match self {
            ShapeKind::Disk => [55.0, 35.0],
            ShapeKind::Square => [-50.0, 40.0],
            ShapeKind::Triangle => [15.0, -55.0],
            ShapeKind::Ring => [5.0, 65.0],
        }
    }

    /// Whether `(dy, dx)`, relative to the shape center, lies inside a shape
    /// of radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= 0.8 * r && dx.abs() <= 0.8 * r,
            ShapeKind::Triangle => dy <= 0.7 * r && dy >= -r && dx.abs() <= (dy + r) * 0.6,
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape radius range as a fraction of the image size.
    pub min_radius: f64,
    pub max_radius: f64,
    pub texture: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 32,
            min_shapes: 1,
            max_shapes: 3,
            min_radius: 0.12,
            max_radius: 0.3,
            texture: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

fn lab_color(l: f64, ab: [f64; 2]) -> [f64; 3] {
    let rgb = lab_pixel_to_rgb([l, ab[0], ab[1]]);
    rgb.map(|v| v.clamp(0.0, 1.0))
}

fn background(cfg: &SceneConfig, rng: &mut impl Rng) -> Image {
    let n = cfg.size;
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let angle = rng.random_range(0.0..TAU);
    let (sin, cos) = angle.sin_cos();
    let freq = rng.random_range(1.0..4.0);
    let phase = rng.random_range(0.0..TAU);
    let mut im = Image::filled(3, n, n, 0.0);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 / n as f64 - 0.5, y as f64 / n as f64 - 0.5);
            let t = (cos * u + sin * v + 0.5).clamp(0.0, 1.0);
            let tex = cfg.texture * (TAU * freq * (u - v) + phase).sin();
            for c in 0..3 {
                im.set(c, y, x, (c0[c] * (1.0 - t) + c1[c] * t + tex).clamp(0.0, 1.0));
            }
        }
    }
    im
}

fn paint(im: &mut Image, shape: &PlacedShape, color: [f64; 3]) {
    for y in 0..im.height {
        for x in 0..im.width {
            if shape.kind.contains(y as f64 - shape.cy, x as f64 - shape.cx, shape.radius) {
                for (c, &v) in color.iter().enumerate() {
                    im.set(c, y, x, v);
                }
            }
        }
    }
}

fn place(kind: ShapeKind, cfg: &SceneConfig, rng: &mut impl Rng) -> PlacedShape {
    let n = cfg.size as f64;
    let radius = rng.random_range(cfg.min_radius..=cfg.max_radius) * n;
    PlacedShape {
        kind,
        cy: rng.random_range(radius..=n - radius),
        cx: rng.random_range(radius..=n - radius),
        radius,
    }
}

/// A pre-training scene and the shapes drawn into it.
pub fn render_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> (Image, Vec<PlacedShape>) {
    let mut im = background(cfg, rng);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes.max(cfg.min_shapes));
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::ALL[rng.random_range(0..4)];
        let s = place(kind, cfg, rng);
        let [a, b] = kind.chroma();
        let ab = [a + rng.random_range(-8.0..8.0), b + rng.random_range(-8.0..8.0)];
        let color = lab_color(rng.random_range(40.0..80.0), ab);
        paint(&mut im, &s, color);
        shapes.push(s);
    }
    (im, shapes)
}

/// A benchmark image: one shape of class `label` in an arbitrary color.
pub fn render_labeled(cfg: &SceneConfig, label: usize, rng: &mut impl Rng) -> Image {
    let mut im = background(cfg, rng);
    let kind = ShapeKind::ALL[label % 4];
    let s = place(kind, cfg, rng);
    // Keep the shape clearly separated from the background in lightness.
    let bg_l = rgb_pixel_to_lab({
        let p = im.pixel(s.cy as usize, s.cx as usize);
        [p[0], p[1], p[2]]
    })[0];
    let l = if bg_l > 50.0 { rng.random_range(10.0..30.0) } else { rng.random_range(70.0..90.0) };
    let hue = rng.random_range(0.0..TAU);
    let chroma = rng.random_range(0.0..40.0);
    let color = lab_color(l, [chroma * hue.cos(), chroma * hue.sin()]);
    paint(&mut im, &s, color);
    im
}

/// An image with a per-pixel depth map.
///
/// Depth is a tilted plane with nearer boxes in front of it. Brightness
/// falls off with depth and a stripe texture shrinks with distance, so depth
/// is recoverable from appearance.
pub fn render_depth_scene(size: usize, rng: &mut impl Rng) -> (Image, Vec<f64>) {
    let n = size as f64;
    let base = rng.random_range(2.5..4.0);
    let (gy, gx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mut depth = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            depth[y * size + x] = base + gy * (y as f64 / n - 0.5) + gx * (x as f64 / n - 0.5);
        }
    }
    for _ in 0..rng.random_range(1..=2) {
        let side = rng.random_range(0.2..0.4) * n;
        let (top, left) = (rng.random_range(0.0..n - side), rng.random_range(0.0..n - side));
        let d = rng.random_range(1.0..2.0);
        for y in (top as usize)..((top + side) as usize).min(size) {
            for x in (left as usize)..((left + side) as usize).min(size) {
                depth[y * size + x] = d;
            }
        }
    }
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
    let mut im = Image::filled(3, size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let d = depth[y * size + x];
            let stripes = 0.5 + 0.5 * (TAU * (x as f64 + y as f64) / (2.0 * d)).sin();
            let v = (1.6 / d) * (0.8 + 0.2 * stripes);
            for (c, t) in tint.iter().enumerate() {
                im.set(c, y, x, (v * t).clamp(0.0, 1.0));
            }
        }
    }
    (im, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let cfg = SceneConfig::default();
        let (a, sa) = render_scene(&cfg, &mut stream(3, "scene", &[0]));
        let (b, sb) = render_scene(&cfg, &mut stream(3, "scene", &[0]));
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(!sa.is_empty() && sa.len() <= 3);
    }

    #[test]
    fn labeled_shape_is_visible() {
        let cfg = SceneConfig::default();
        for label in 0..4 {
            let im = render_labeled(&cfg, label, &mut stream(4, "labeled", &[label as u64]));
            let l: Vec<f64> = (0..32 * 32)
                .map(|i| rgb_pixel_to_lab([im.data[i], im.data[1024 + i], im.data[2048 + i]])[0])
                .collect();
            let spread = l.iter().cloned().fold(f64::MIN, f64::max) - l.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread > 20.0, "label {label}: lightness spread {spread}");
        }
    }

    #[test]
    fn depth_is_positive() {
        let (im, d) = render_depth_scene(16, &mut stream(5, "depth", &[]));
        assert_eq!(d.len(), 256);
        assert!(d.iter().all(|&v| v > 0.0));
        assert_eq!(im.shape(), [3, 16, 16]);
    }
}
