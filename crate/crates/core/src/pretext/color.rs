//! sRGB (D65) <-> CIE Lab, harmonization, color dropping and ab
//! quantization.

use std::sync::OnceLock;

use rand::Rng;

use super::{Image, PretextError};

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const DELTA: f64 = 6.0 / 29.0;

/// Reference white as the image of RGB (1,1,1), so white maps to
/// exactly (100, 0, 0).
fn white() -> [f64; 3] {
    let mut w = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        w[i] = row.iter().sum();
    }
    w
}

fn xyz_to_rgb_matrix() -> &'static [[f64; 3]; 3] {
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    INV.get_or_init(|| {
        let m = RGB_TO_XYZ;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
        [
            [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
            [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
            [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
        ]
    })
}

fn to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn from_linear(c: f64) -> f64 {
    if c <= 0.040_45 / 12.92 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(u: f64) -> f64 {
    if u > DELTA {
        u * u * u
    } else {
        3.0 * DELTA * DELTA * (u - 4.0 / 29.0)
    }
}

/// One pixel, RGB in [0, 1] to Lab. Inputs are not clamped.
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(to_linear);
    let w = white();
    let mut f = [0.0; 3];
    for i in 0..3 {
        let xyz: f64 = (0..3).map(|j| RGB_TO_XYZ[i][j] * lin[j]).sum();
        f[i] = lab_f(xyz / w[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = white();
    let xyz = [lab_f_inv(fx) * w[0], lab_f_inv(fy) * w[1], lab_f_inv(fz) * w[2]];
    let inv = xyz_to_rgb_matrix();
    let mut rgb = [0.0; 3];
    for i in 0..3 {
        rgb[i] = from_linear((0..3).map(|j| inv[i][j] * xyz[j]).sum());
    }
    rgb
}

fn expect_rgb(image: &Image) -> Result<(), PretextError> {
    if image.channels != 3 {
        return Err(PretextError::ChannelCount {
            expected: 3,
            got: image.channels,
        });
    }
    Ok(())
}

/// Converts an RGB image to Lab, clamping samples outside [0, 1]. Returns
/// the number of clamped samples alongside the image.
pub fn rgb_to_lab_counted(image: &Image) -> Result<(Image, usize), PretextError> {
    expect_rgb(image)?;
    let mut clamped = 0;
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let mut px = [0.0; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let raw = image.get(c, y, x);
                let cl = raw.clamp(0.0, 1.0);
                if cl != raw || raw.is_nan() {
                    clamped += 1;
                }
                *v = if raw.is_nan() { 0.0 } else { cl };
            }
            for (c, v) in rgb_pixel_to_lab(px).into_iter().enumerate() {
                out.set(c, y, x, v);
            }
        }
    }
    Ok((out, clamped))
}

pub fn rgb_to_lab(image: &Image) -> Result<Image, PretextError> {
    rgb_to_lab_counted(image).map(|(im, _)| im)
}

pub fn lab_to_rgb(image: &Image) -> Result<Image, PretextError> {
    expect_rgb(image)?;
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let px = [image.get(0, y, x), image.get(1, y, x), image.get(2, y, x)];
            for (c, v) in lab_pixel_to_rgb(px).into_iter().enumerate() {
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Replaces every channel with the Lab lightness of the input (0..100).
pub fn harmonize(image: &Image) -> Result<Image, PretextError> {
    let lab = rgb_to_lab(image)?;
    let l = lab.plane(0).to_vec();
    let mut out = lab;
    for c in 1..3 {
        out.plane_mut(c).copy_from_slice(&l);
    }
    Ok(out)
}

/// The gray RGB image whose lightness is each pixel's first channel.
pub fn lightness_to_gray_rgb(image: &Image) -> Image {
    let mut out = Image::filled(3, image.height, image.width, 0.0);
    for y in 0..image.height {
        for x in 0..image.width {
            let rgb = lab_pixel_to_rgb([image.get(0, y, x), 0.0, 0.0]);
            for (c, v) in rgb.into_iter().enumerate() {
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// Lightness-only network input: harmonized and scaled to [0, 1].
pub fn lightness_input(image: &Image) -> Result<Image, PretextError> {
    Ok(harmonize(image)?.map(|v| v / 100.0))
}

/// Keeps one uniformly chosen channel and replaces the other two with
/// uniform noise over [0, 1]. Returns the kept channel index.
pub fn preprocess_color_drop(image: &Image, rng: &mut impl Rng) -> Result<(Image, usize), PretextError> {
    expect_rgb(image)?;
    let keep = rng.random_range(0..3);
    let mut out = image.clone();
    for c in (0..3).filter(|&c| c != keep) {
        for v in out.plane_mut(c) {
            *v = rng.random_range(0.0..1.0);
        }
    }
    Ok((out, keep))
}

pub const AB_RANGE: f64 = 110.0;

/// Maps an (a, b) pair to a class id.
#[derive(Clone, Debug, PartialEq)]
pub enum AbQuantizer {
    /// `bins x bins` uniform cells over [-110, 110]^2, row-major with `a`
    /// selecting the row. Out-of-range values clamp to edge cells.
    Grid { bins: usize },
    /// Nearest of an explicit list of bin centers.
    Table(Vec<[f64; 2]>),
}

impl AbQuantizer {
    pub fn grid(bins: usize) -> Result<Self, PretextError> {
        if bins < 2 {
            return Err(PretextError::Config(format!("ab grid needs >= 2 bins per axis, got {bins}")));
        }
        Ok(AbQuantizer::Grid { bins })
    }

    /// Parses whitespace-separated `a b` pairs, one per line.
    pub fn from_table_text(text: &str) -> Result<Self, PretextError> {
        let mut centers = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| PretextError::Config(format!("bin table line {}: {e}", i + 1)))?;
            if vals.len() != 2 {
                return Err(PretextError::Config(format!("bin table line {}: expected 2 values", i + 1)));
            }
            centers.push([vals[0], vals[1]]);
        }
        if centers.len() < 2 {
            return Err(PretextError::Config("bin table needs at least 2 centers".into()));
        }
        Ok(AbQuantizer::Table(centers))
    }

    pub fn classes(&self) -> usize {
        match self {
            AbQuantizer::Grid { bins } => bins * bins,
            AbQuantizer::Table(c) => c.len(),
        }
    }

    fn cell(v: f64, bins: usize) -> usize {
        let width = 2.0 * AB_RANGE / bins as f64;
        let i = ((v + AB_RANGE) / width).floor();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(bins - 1)
        }
    }

    pub fn quantize(&self, a: f64, b: f64) -> usize {
        match self {
            AbQuantizer::Grid { bins } => Self::cell(a, *bins) * bins + Self::cell(b, *bins),
            AbQuantizer::Table(centers) => {
                let mut best = (0, f64::INFINITY);
                for (k, c) in centers.iter().enumerate() {
                    let d = (c[0] - a).powi(2) + (c[1] - b).powi(2);
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                best.0
            }
        }
    }

    pub fn bin_center(&self, id: usize) -> [f64; 2] {
        match self {
            AbQuantizer::Grid { bins } => {
                let width = 2.0 * AB_RANGE / *bins as f64;
                let at = |i: usize| -AB_RANGE + (i as f64 + 0.5) * width;
                [at(id / bins), at(id % bins)]
            }
            AbQuantizer::Table(c) => c[id],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn white_and_black_points() {
        let w = rgb_pixel_to_lab([1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-4 && w[1].abs() < 1e-4 && w[2].abs() < 1e-4, "{w:?}");
        assert_eq!(rgb_pixel_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn lab_round_trip_is_tight() {
        let mut rng = stream(1, "lab", &[]);
        let mut worst = 0.0f64;
        for _ in 0..20_000 {
            let rgb = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let lab = rgb_pixel_to_lab(rgb);
            assert!((0.0..=100.0 + 1e-9).contains(&lab[0]));
            assert!(lab[1].abs() <= 110.0 && lab[2].abs() <= 110.0, "{lab:?}");
            let again = rgb_pixel_to_lab(lab_pixel_to_rgb(lab));
            for i in 0..3 {
                worst = worst.max((again[i] - lab[i]).abs());
            }
        }
        assert!(worst < 1e-6, "round trip error {worst}");
    }

    #[test]
    fn out_of_range_inputs_are_counted() {
        let im = Image::new(3, 1, 2, vec![1.5, 0.2, -0.1, 0.3, 0.4, 0.5]);
        let (_, clamped) = rgb_to_lab_counted(&im).unwrap();
        assert_eq!(clamped, 2);
    }

    #[test]
    fn harmonize_replicates_lightness() {
        let white = Image::filled(3, 2, 2, 1.0);
        let h = harmonize(&white).unwrap();
        assert!(h.data.iter().all(|&v| (v - 100.0).abs() < 1e-9));

        let mut rng = stream(2, "harm", &[]);
        let im = Image::new(3, 4, 4, (0..48).map(|_| rng.random_range(0.0..1.0)).collect());
        let h = harmonize(&im).unwrap();
        assert_eq!(h.plane(0), h.plane(1));
        assert_eq!(h.plane(1), h.plane(2));

        let twice = harmonize(&lightness_to_gray_rgb(&h)).unwrap();
        for (a, b) in h.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn color_drop_keeps_one_channel_exactly() {
        let mut rng = stream(3, "img", &[]);
        let im = Image::new(3, 4, 4, (0..48).map(|_| rng.random_range(0.0..1.0)).collect());
        let (a, ka) = preprocess_color_drop(&im, &mut stream(9, "drop", &[])).unwrap();
        let (b, kb) = preprocess_color_drop(&im, &mut stream(9, "drop", &[])).unwrap();
        assert_eq!(ka, kb);
        assert_eq!(a, b);
        assert_eq!(a.plane(ka), im.plane(ka));
        for c in (0..3).filter(|&c| c != ka) {
            assert_ne!(a.plane(c), im.plane(c));
        }
        assert!(preprocess_color_drop(&Image::filled(1, 2, 2, 0.0), &mut rng).is_err());
    }

    #[test]
    fn color_drop_channel_frequencies_are_uniform() {
        let im = Image::filled(3, 1, 1, 0.5);
        let mut rng = stream(4, "freq", &[]);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            counts[preprocess_color_drop(&im, &mut rng).unwrap().1] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    /// Brute force: scan every cell's bounds and report which contains the point.
    fn grid_oracle(a: f64, b: f64, bins: usize) -> usize {
        let w = 220.0 / bins as f64;
        let find = |v: f64| (0..bins).find(|&i| v >= -110.0 + i as f64 * w && v < -110.0 + (i + 1) as f64 * w);
        find(a).unwrap() * bins + find(b).unwrap()
    }

    #[test]
    fn quantizer_examples() {
        let q = AbQuantizer::grid(13).unwrap();
        assert_eq!(grid_oracle(0.0, 0.0, 13), 84);
        assert_eq!(q.quantize(0.0, 0.0), 84);
        assert_eq!(q.quantize(-110.0, -110.0), 0);
        assert_eq!(q.quantize(500.0, 500.0), 168);
        assert_eq!(q.quantize(-500.0, 3.0), q.quantize(-110.0, 3.0));
        for k in 0..q.classes() {
            let [a, b] = q.bin_center(k);
            assert_eq!(q.quantize(a, b), k);
        }
        assert!(AbQuantizer::grid(1).is_err());
    }

    #[test]
    fn quantizer_tiles_the_range() {
        for bins in [2, 5, 13] {
            let q = AbQuantizer::grid(bins).unwrap();
            let mut hits = vec![0usize; q.classes()];
            let steps = 97;
            for i in 0..steps {
                for j in 0..steps {
                    let a = -110.0 + 220.0 * (i as f64 + 0.37) / steps as f64;
                    let b = -110.0 + 220.0 * (j as f64 + 0.61) / steps as f64;
                    let id = q.quantize(a, b);
                    assert_eq!(id, grid_oracle(a, b, bins));
                    hits[id] += 1;
                }
            }
            assert!(hits.iter().all(|&h| h > 0), "every cell is reached");
        }
    }

    #[test]
    fn table_quantizer_picks_nearest_center() {
        let q = AbQuantizer::from_table_text("# a b\n0 0\n50 50\n-40 10\n").unwrap();
        assert_eq!(q.classes(), 3);
        assert_eq!(q.quantize(45.0, 60.0), 1);
        for k in 0..3 {
            let [a, b] = q.bin_center(k);
            assert_eq!(q.quantize(a, b), k);
        }
        assert!(AbQuantizer::from_table_text("1 2 3\n").is_err());
    }
}
