//! Image loading, resizing, normalisation and training-time augmentation.
//!
//! Training mode applies a horizontal flip and then RandAug: `ops` operations
//! drawn uniformly (with replacement) from [`RANDAUG_OPS`], each at
//! `magnitude` on a 0..=30 scale with a random sign. Geometric operations
//! are limited to small rotations (at most 10° at magnitude 30) and
//! translations (at most 10% of the side), so aligned crops stay aligned.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_MAGNITUDE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandAugOp {
    Identity,
    AutoContrast,
    Equalize,
    Brightness,
    Color,
    Contrast,
    Sharpness,
    Posterize,
    Solarize,
    Rotate,
    TranslateX,
    TranslateY,
}

pub const RANDAUG_OPS: [RandAugOp; 12] = [
    RandAugOp::Identity,
    RandAugOp::AutoContrast,
    RandAugOp::Equalize,
    RandAugOp::Brightness,
    RandAugOp::Color,
    RandAugOp::Contrast,
    RandAugOp::Sharpness,
    RandAugOp::Posterize,
    RandAugOp::Solarize,
    RandAugOp::Rotate,
    RandAugOp::TranslateX,
    RandAugOp::TranslateY,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    /// RandAug operations per image; 0 disables RandAug.
    #[serde(default = "default_ops")]
    pub ops: usize,
    #[serde(default = "default_magnitude")]
    pub magnitude: usize,
}

fn default_flip() -> f64 {
    0.5
}

fn default_ops() -> usize {
    4
}

fn default_magnitude() -> usize {
    16
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: default_flip(),
            ops: default_ops(),
            magnitude: default_magnitude(),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            ops: 0,
            magnitude: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("augment.flip_prob", "must lie in [0, 1]"));
        }
        if self.magnitude > MAX_MAGNITUDE {
            return Err(Error::config("augment.magnitude", "must be at most 30"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub target_size: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub augment: AugmentConfig,
}

impl Preprocessor {
    pub fn new(target_size: usize, mean: Vec<f64>, std: Vec<f64>, augment: AugmentConfig) -> Result<Self> {
        if mean.len() != 3 || std.len() != 3 {
            return Err(Error::dims("normalisation channels", 3, (mean.len(), std.len())));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("pixel_std", "must be positive"));
        }
        augment.validate()?;
        Ok(Self {
            target_size,
            mean,
            std,
            augment,
        })
    }

    /// Resized, normalised `(H, W, 3)` array. Eval mode is deterministic and
    /// ignores `seed`.
    pub fn apply(&self, image: &RgbImage, train_mode: bool, seed: u64) -> Array3<f64> {
        let t = self.target_size as u32;
        let resized;
        let img = if image.dimensions() == (t, t) {
            image
        } else {
            resized = image::imageops::resize(image, t, t, FilterType::Triangle);
            &resized
        };
        let s = self.target_size;
        let raw = img.as_raw();
        let mut x = Array3::from_shape_fn((s, s, 3), |(y, xx, c)| raw[(y * s + xx) * 3 + c] as f64 / 255.0);
        if train_mode {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if rng.random::<f64>() < self.augment.flip_prob {
                x = hflip(&x);
            }
            for _ in 0..self.augment.ops {
                let op = RANDAUG_OPS[rng.random_range(0..RANDAUG_OPS.len())];
                let signed = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let level = self.augment.magnitude as f64 / MAX_MAGNITUDE as f64;
                x = apply_op(op, &x, signed * level);
            }
        }
        Zip::indexed(&mut x).for_each(|(_, _, c), v| *v = (*v - self.mean[c]) / self.std[c]);
        x
    }
}

/// [`Preprocessor::apply`] with mean and std 0.5 and default augmentation.
pub fn preprocess(image: &RgbImage, target_size: usize, train_mode: bool, seed: u64) -> Array3<f64> {
    Preprocessor::new(target_size, vec![0.5; 3], vec![0.5; 3], AugmentConfig::default())
        .expect("valid defaults")
        .apply(image, train_mode, seed)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::MissingImage(path.display().to_string()));
    }
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
}

pub fn hflip(x: &Array3<f64>) -> Array3<f64> {
    let w = x.dim().1;
    Array3::from_shape_fn(x.dim(), |(y, xx, c)| x[[y, w - 1 - xx, c]])
}

fn luma(x: &Array3<f64>, y: usize, xx: usize) -> f64 {
    0.299 * x[[y, xx, 0]] + 0.587 * x[[y, xx, 1]] + 0.114 * x[[y, xx, 2]]
}

fn blend(a: &Array3<f64>, b: &Array3<f64>, factor: f64) -> Array3<f64> {
    // b + factor (a - b), PIL's ImageEnhance convention.
    let mut out = b + &((a - b) * factor);
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Bilinear resampling of `x` at `src(y, x)` (source coordinates), filling
/// out-of-range samples with 0.
fn warp(x: &Array3<f64>, src: impl Fn(f64, f64) -> (f64, f64)) -> Array3<f64> {
    let (h, w, ch) = x.dim();
    let mut out = Array3::zeros(x.dim());
    for y in 0..h {
        for xx in 0..w {
            let (sy, sx) = src(y as f64, xx as f64);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            for c in 0..ch {
                let mut acc = 0.0;
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let (py, px) = (y0 + dy, x0 + dx);
                        if wy * wx > 0.0 && py >= 0.0 && px >= 0.0 && py < h as f64 && px < w as f64 {
                            acc += wy * wx * x[[py as usize, px as usize, c]];
                        }
                    }
                }
                out[[y, xx, c]] = acc;
            }
        }
    }
    out
}

/// Applies one operation; `level` is the signed magnitude in `[-1, 1]`.
pub fn apply_op(op: RandAugOp, x: &Array3<f64>, level: f64) -> Array3<f64> {
    let (h, w, ch) = x.dim();
    match op {
        RandAugOp::Identity => x.clone(),
        RandAugOp::AutoContrast => {
            let mut out = x.clone();
            for c in 0..ch {
                let plane = x.index_axis(ndarray::Axis(2), c);
                let lo = plane.fold(f64::INFINITY, |m, &v| m.min(v));
                let hi = plane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                if hi > lo {
                    out.index_axis_mut(ndarray::Axis(2), c)
                        .mapv_inplace(|v| (v - lo) / (hi - lo));
                }
            }
            out
        }
        RandAugOp::Equalize => {
            let mut out = x.clone();
            let n = (h * w) as f64;
            for c in 0..ch {
                let mut hist = [0usize; 256];
                for &v in x.index_axis(ndarray::Axis(2), c) {
                    hist[(v * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
                }
                let mut cdf = [0usize; 256];
                let mut run = 0;
                for (i, &count) in hist.iter().enumerate() {
                    run += count;
                    cdf[i] = run;
                }
                let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0) as f64;
                if n - cdf_min <= 0.0 {
                    continue;
                }
                out.index_axis_mut(ndarray::Axis(2), c).mapv_inplace(|v| {
                    let bin = (v * 255.0).round().clamp(0.0, 255.0) as usize;
                    ((cdf[bin] as f64 - cdf_min) / (n - cdf_min)).clamp(0.0, 1.0)
                });
            }
            out
        }
        RandAugOp::Brightness => blend(x, &Array3::zeros(x.dim()), 1.0 + 0.9 * level),
        RandAugOp::Color => {
            let gray = Array3::from_shape_fn(x.dim(), |(y, xx, _)| luma(x, y, xx));
            blend(x, &gray, 1.0 + 0.9 * level)
        }
        RandAugOp::Contrast => {
            let mut mean = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    mean += luma(x, y, xx);
                }
            }
            mean /= (h * w) as f64;
            blend(x, &Array3::from_elem(x.dim(), mean), 1.0 + 0.9 * level)
        }
        RandAugOp::Sharpness => {
            // 3×3 smoothing (centre weight 5, others 1), borders kept.
            let mut smooth = x.clone();
            for y in 1..h.saturating_sub(1) {
                for xx in 1..w.saturating_sub(1) {
                    for c in 0..ch {
                        let mut acc = 4.0 * x[[y, xx, c]];
                        for dy in 0..3 {
                            for dx in 0..3 {
                                acc += x[[y + dy - 1, xx + dx - 1, c]];
                            }
                        }
                        smooth[[y, xx, c]] = acc / 13.0;
                    }
                }
            }
            blend(x, &smooth, 1.0 + 0.9 * level)
        }
        RandAugOp::Posterize => {
            let bits = 8 - (4.0 * level.abs()).round() as u32;
            let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
            x.mapv(|v| (((v * 255.0).round() as u32) & mask) as f64 / 255.0)
        }
        RandAugOp::Solarize => {
            let threshold = 1.0 - level.abs();
            x.mapv(|v| if v >= threshold { 1.0 - v } else { v })
        }
        RandAugOp::Rotate => {
            let theta = (10.0 * level).to_radians();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (s, c) = theta.sin_cos();
            warp(x, |y, xx| {
                let (dy, dx) = (y - cy, xx - cx);
                (cy + c * dy - s * dx, cx + s * dy + c * dx)
            })
        }
        RandAugOp::TranslateX => {
            let shift = (0.1 * w as f64 * level).round();
            warp(x, |y, xx| (y, xx - shift))
        }
        RandAugOp::TranslateY => {
            let shift = (0.1 * h as f64 * level).round();
            warp(x, |y, xx| (y - shift, xx))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn test_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 + y) as u8, (y * 5) as u8, ((x * y) % 256) as u8]))
    }

    fn pre(augment: AugmentConfig) -> Preprocessor {
        Preprocessor::new(32, vec![0.5; 3], vec![0.5; 3], augment).unwrap()
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let img = test_image(40, 40);
        assert_eq!(preprocess(&img, 32, false, 1), preprocess(&img, 32, false, 2));
        assert_eq!(preprocess(&img, 32, false, 1).dim(), (32, 32, 3));
    }

    #[test]
    fn forced_flip_mirrors_eval_output() {
        let img = test_image(32, 32);
        let flip_only = pre(AugmentConfig {
            flip_prob: 1.0,
            ops: 0,
            magnitude: 16,
        });
        let eval = flip_only.apply(&img, false, 0);
        let train = flip_only.apply(&img, true, 5);
        assert_eq!(train, hflip(&eval));
        assert_eq!(hflip(&train), eval);
    }

    #[test]
    fn normalisation_maps_unit_range_to_symmetric() {
        let white = RgbImage::from_pixel(32, 32, Rgb([255, 255, 255]));
        let black = RgbImage::from_pixel(32, 32, Rgb([0, 0, 0]));
        let p = pre(AugmentConfig::none());
        assert!(p.apply(&white, false, 0).iter().all(|&v| v == 1.0));
        assert!(p.apply(&black, false, 0).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn train_mode_is_seeded() {
        let img = test_image(32, 32);
        let p = pre(AugmentConfig::default());
        assert_eq!(p.apply(&img, true, 3), p.apply(&img, true, 3));
        let differs = (0..8).any(|s| p.apply(&img, true, s) != p.apply(&img, true, s + 100));
        assert!(differs);
    }

    #[test]
    fn every_op_keeps_shape_and_range() {
        let p = pre(AugmentConfig::none());
        let x = p.apply(&test_image(32, 32), false, 0).mapv(|v| v * 0.5 + 0.5);
        for op in RANDAUG_OPS {
            for level in [-16.0 / 30.0, 16.0 / 30.0, 1.0] {
                let y = apply_op(op, &x, level);
                assert_eq!(y.dim(), x.dim());
                assert!(y.iter().all(|v| (0.0..=1.0).contains(v)), "{op:?}");
            }
        }
        assert_eq!(apply_op(RandAugOp::Rotate, &x, 0.0), x);
        assert_eq!(apply_op(RandAugOp::TranslateX, &x, 0.0), x);
    }

    #[test]
    fn posterize_at_default_magnitude_keeps_six_bits() {
        let x = Array3::from_elem((1, 1, 3), 255.0 / 255.0);
        let y = apply_op(RandAugOp::Posterize, &x, 16.0 / 30.0);
        assert_eq!(y[[0, 0, 0]], 252.0 / 255.0);
    }

    #[test]
    fn translate_moves_content() {
        let mut x = Array3::zeros((10, 10, 3));
        x[[4, 4, 0]] = 1.0;
        let y = apply_op(RandAugOp::TranslateX, &x, 1.0);
        assert_eq!(y[[4, 5, 0]], 1.0);
        assert_eq!(y[[4, 4, 0]], 0.0);
    }

    #[test]
    fn missing_and_undecodable_images() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(&dir.path().join("nope.png")), Err(Error::MissingImage(_))));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        assert!(matches!(load_image(&bad), Err(Error::Decode { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(Preprocessor::new(8, vec![0.5; 3], vec![0.0; 3], AugmentConfig::default()).is_err());
        assert!(AugmentConfig { magnitude: 31, ..Default::default() }.validate().is_err());
    }
}
