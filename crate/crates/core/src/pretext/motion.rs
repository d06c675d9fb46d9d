//! Synthetic video with exact motion ground truth, and the foreground
//! masks derived from it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, PretextError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovingObject {
    /// Top-left corner in frame 0.
    pub top: i64,
    pub left: i64,
    pub size: usize,
    /// Pixels per frame, `(rows, cols)`.
    pub velocity: (i64, i64),
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub camera_velocity: (i64, i64),
    /// Explicit objects; when empty, `random_objects` are drawn.
    pub objects: Vec<MovingObject>,
    pub random_objects: usize,
    pub max_speed: i64,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 4,
            camera_velocity: (0, 1),
            objects: Vec::new(),
            random_objects: 2,
            max_speed: 2,
            min_size: 6,
            max_size: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<Image>,
    pub camera_velocity: (i64, i64),
    /// Per-pixel motion of frame 0 (row-major), `(rows, cols)` per frame.
    pub motion: Vec<(i64, i64)>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSample {
    pub frame: Image,
    /// Row-major binary mask at `frame / factor` resolution.
    pub mask: Vec<u8>,
    pub mask_height: usize,
    pub mask_width: usize,
}

fn texture(height: usize, width: usize, rng: &mut impl Rng) -> Image {
    // Sum of a few random periodic waves per channel, so translation with
    // wrap-around stays seamless.
    let mut out = Image::filled(3, height, width, 0.0);
    for c in 0..3 {
        let base = rng.random_range(0.25..0.6);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(1..=3) as f64,
                    rng.random_range(1..=3) as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.03..0.1),
                )
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let mut v = base;
                for &(ky, kx, phase, amp) in &waves {
                    let arg = std::f64::consts::TAU * (ky * y as f64 / height as f64 + kx * x as f64 / width as f64);
                    v += amp * (arg + phase).sin();
                }
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn synth_motion_sequence(cfg: &MotionConfig, rng: &mut impl Rng) -> Result<MotionSequence, PretextError> {
    if cfg.frames < 2 {
        return Err(PretextError::Config(format!("motion needs >= 2 frames, got {}", cfg.frames)));
    }
    if cfg.height < 2 || cfg.width < 2 {
        return Err(PretextError::Config(format!("degenerate frame size {}x{}", cfg.height, cfg.width)));
    }
    let (h, w) = (cfg.height, cfg.width);
    let objects: Vec<MovingObject> = if cfg.objects.is_empty() {
        let max_size = cfg.max_size.min(h).min(w).max(1);
        let min_size = cfg.min_size.clamp(1, max_size);
        (0..cfg.random_objects)
            .map(|_| {
                let size = rng.random_range(min_size..=max_size);
                let mut velocity = cfg.camera_velocity;
                while velocity == cfg.camera_velocity {
                    velocity = (
                        rng.random_range(-cfg.max_speed..=cfg.max_speed),
                        rng.random_range(-cfg.max_speed..=cfg.max_speed),
                    );
                }
                MovingObject {
                    top: rng.random_range(0..=(h - size) as i64),
                    left: rng.random_range(0..=(w - size) as i64),
                    size,
                    velocity,
                    color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                }
            })
            .collect()
    } else {
        cfg.objects.clone()
    };
    if let Some(o) = objects.iter().find(|o| o.size == 0 || o.size > h.min(w)) {
        return Err(PretextError::Config(format!("object size {} does not fit a {h}x{w} frame", o.size)));
    }
    let background = texture(h, w, rng);
    let wrap = |v: i64, n: usize| v.rem_euclid(n as i64) as usize;
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames as i64 {
        let mut frame = Image::filled(3, h, w, 0.0);
        let (cy, cx) = (cfg.camera_velocity.0 * t, cfg.camera_velocity.1 * t);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (wrap(y as i64 - cy, h), wrap(x as i64 - cx, w));
                for c in 0..3 {
                    frame.set(c, y, x, background.get(c, sy, sx));
                }
            }
        }
        for o in &objects {
            let (top, left) = (o.top + o.velocity.0 * t, o.left + o.velocity.1 * t);
            for dy in 0..o.size as i64 {
                for dx in 0..o.size as i64 {
                    let (y, x) = (wrap(top + dy, h), wrap(left + dx, w));
                    for c in 0..3 {
                        frame.set(c, y, x, o.color[c]);
                    }
                }
            }
        }
        frames.push(frame);
    }
    let mut motion = vec![cfg.camera_velocity; h * w];
    for o in &objects {
        for dy in 0..o.size as i64 {
            for dx in 0..o.size as i64 {
                motion[wrap(o.top + dy, h) * w + wrap(o.left + dx, w)] = o.velocity;
            }
        }
    }
    Ok(MotionSequence {
        frames,
        camera_velocity: cfg.camera_velocity,
        motion,
        height: h,
        width: w,
    })
}

/// Full-resolution foreground: pixels whose motion differs from the camera.
pub fn foreground(seq: &MotionSequence) -> Vec<u8> {
    seq.motion.iter().map(|&m| u8::from(m != seq.camera_velocity)).collect()
}

/// Majority vote over `factor x factor` cells; ties count as foreground.
pub fn downsample_mask(mask: &[u8], height: usize, width: usize, factor: usize) -> Result<Vec<u8>, PretextError> {
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(PretextError::Indivisible {
            extent: height.max(width),
            by: factor,
        });
    }
    let (mh, mw) = (height / factor, width / factor);
    let mut out = Vec::with_capacity(mh * mw);
    for my in 0..mh {
        for mx in 0..mw {
            let mut fg = 0usize;
            for y in my * factor..(my + 1) * factor {
                for x in mx * factor..(mx + 1) * factor {
                    fg += mask[y * width + x] as usize;
                }
            }
            out.push(u8::from(2 * fg >= factor * factor));
        }
    }
    Ok(out)
}

pub fn motion_mask(seq: &MotionSequence, factor: usize) -> Result<MotionSample, PretextError> {
    let mask = downsample_mask(&foreground(seq), seq.height, seq.width, factor)?;
    Ok(MotionSample {
        frame: seq.frames[0].clone(),
        mask,
        mask_height: seq.height / factor,
        mask_width: seq.width / factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn square(top: i64, left: i64, size: usize, velocity: (i64, i64)) -> MovingObject {
        MovingObject {
            top,
            left,
            size,
            velocity,
            color: [1.0, 0.0, 0.0],
        }
    }

    #[test]
    fn object_moving_with_camera_is_background() {
        let cfg = MotionConfig {
            camera_velocity: (1, -1),
            objects: vec![square(4, 4, 6, (1, -1))],
            ..MotionConfig::default()
        };
        let seq = synth_motion_sequence(&cfg, &mut stream(1, "m", &[])).unwrap();
        assert!(foreground(&seq).iter().all(|&v| v == 0));
    }

    #[test]
    fn static_camera_square_footprint() {
        let cfg = MotionConfig {
            camera_velocity: (0, 0),
            objects: vec![square(5, 9, 7, (0, 2))],
            ..MotionConfig::default()
        };
        let seq = synth_motion_sequence(&cfg, &mut stream(2, "m", &[])).unwrap();
        let fg = foreground(&seq);
        for y in 0..32 {
            for x in 0..32 {
                let inside = (5..12).contains(&y) && (9..16).contains(&x);
                assert_eq!(fg[y * 32 + x] == 1, inside, "({y},{x})");
            }
        }
        // The square really moves between frames and the background does not.
        assert_eq!(seq.frames[1].get(0, 5, 16), 1.0);
        assert_eq!(seq.frames[0].get(1, 0, 0), seq.frames[1].get(1, 0, 0));
    }

    #[test]
    fn camera_only_motion_gives_empty_mask() {
        let cfg = MotionConfig {
            camera_velocity: (1, 2),
            random_objects: 0,
            ..MotionConfig::default()
        };
        let seq = synth_motion_sequence(&cfg, &mut stream(3, "m", &[])).unwrap();
        let sample = motion_mask(&seq, 4).unwrap();
        assert!(sample.mask.iter().all(|&v| v == 0));
        assert_eq!((sample.mask_height, sample.mask_width), (8, 8));
        // Background translates with the camera.
        assert_eq!(seq.frames[1].get(0, 1, 2), seq.frames[0].get(0, 0, 0));
    }

    #[test]
    fn too_few_frames_is_an_error() {
        for frames in [0, 1] {
            let cfg = MotionConfig { frames, ..MotionConfig::default() };
            assert!(synth_motion_sequence(&cfg, &mut stream(4, "m", &[])).is_err());
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let seq = synth_motion_sequence(&MotionConfig::default(), &mut stream(5, "m", &[])).unwrap();
        assert_eq!(motion_mask(&seq, 1).unwrap().mask, foreground(&seq));
        assert!(motion_mask(&seq, 5).is_err());
    }

    #[test]
    fn checkerboard_vote_matches_brute_force() {
        let (h, w) = (8, 8);
        let checker: Vec<u8> = (0..h * w).map(|i| (((i / w) + (i % w)) % 2) as u8).collect();
        // Every 2x2 cell of a checkerboard has two foreground pixels: a tie.
        let down = downsample_mask(&checker, h, w, 2).unwrap();
        let mut oracle = Vec::new();
        for cy in 0..4 {
            for cx in 0..4 {
                let cells = [(0, 0), (0, 1), (1, 0), (1, 1)];
                let fg = cells.iter().filter(|(a, b)| checker[(2 * cy + a) * w + 2 * cx + b] == 1).count();
                oracle.push(if fg * 2 >= 4 { 1 } else { 0 });
            }
        }
        assert_eq!(down, oracle);
        assert!(down.iter().all(|&v| v == 1));

        let sparse: Vec<u8> = (0..h * w).map(|i| u8::from((i / w) % 2 == 0 && (i % w) % 2 == 0)).collect();
        assert!(downsample_mask(&sparse, h, w, 2).unwrap().iter().all(|&v| v == 0));
    }
}
