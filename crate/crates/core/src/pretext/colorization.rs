//! Per-region color classes for colorization.

use super::color::{rgb_to_lab, AbQuantizer};
use super::{Image, PretextError};

/// Row-major class ids, one per `stride x stride` region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

/// Quantized mean (a, b) of each region of an RGB image.
pub fn make_colorization_targets(
    image: &Image,
    stride: usize,
    quantizer: &AbQuantizer,
) -> Result<LabelGrid, PretextError> {
    for extent in [image.height, image.width] {
        if stride == 0 || extent % stride != 0 {
            return Err(PretextError::Indivisible { extent, by: stride });
        }
    }
    let lab = rgb_to_lab(image)?;
    let (gh, gw) = (image.height / stride, image.width / stride);
    let area = (stride * stride) as f64;
    let mut labels = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let (mut a, mut b) = (0.0, 0.0);
            for y in gy * stride..(gy + 1) * stride {
                for x in gx * stride..(gx + 1) * stride {
                    a += lab.get(1, y, x);
                    b += lab.get(2, y, x);
                }
            }
            labels.push(quantizer.quantize(a / area, b / area));
        }
    }
    Ok(LabelGrid {
        height: gh,
        width: gw,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretext::color::rgb_pixel_to_lab;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn uniform_image_has_one_label() {
        let mut im = Image::filled(3, 8, 8, 0.0);
        im.plane_mut(0).fill(0.9);
        im.plane_mut(1).fill(0.3);
        let q = AbQuantizer::grid(13).unwrap();
        let t = make_colorization_targets(&im, 4, &q).unwrap();
        assert_eq!(t.labels.len(), 4);
        assert!(t.labels.iter().all(|&l| l == t.labels[0]));
        let whole = make_colorization_targets(&im, 8, &q).unwrap();
        assert_eq!((whole.height, whole.width, whole.labels.len()), (1, 1, 1));
    }

    #[test]
    fn matches_per_region_brute_force() {
        let mut rng = stream(7, "col", &[]);
        let im = Image::new(3, 6, 8, (0..144).map(|_| rng.random_range(0.0..1.0)).collect());
        let q = AbQuantizer::grid(13).unwrap();
        let t = make_colorization_targets(&im, 2, &q).unwrap();
        for ry in 0..3 {
            for rx in 0..4 {
                let mut sum = [0.0; 2];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let p = im.pixel(2 * ry + dy, 2 * rx + dx);
                        let lab = rgb_pixel_to_lab([p[0], p[1], p[2]]);
                        sum[0] += lab[1];
                        sum[1] += lab[2];
                    }
                }
                // Grid cell lookup written out independently of the quantizer.
                let cell = |v: f64| (((v / 4.0 + 110.0) / (220.0 / 13.0)).floor() as i64).clamp(0, 12) as usize;
                assert_eq!(t.labels[ry * 4 + rx], cell(sum[0]) * 13 + cell(sum[1]));
            }
        }
    }

    #[test]
    fn indivisible_stride_is_rejected() {
        let im = Image::filled(3, 6, 8, 0.5);
        assert!(matches!(
            make_colorization_targets(&im, 4, &AbQuantizer::grid(13).unwrap()),
            Err(PretextError::Indivisible { extent: 6, by: 4 })
        ));
    }
}
