//! Augmented views and patch masks for one test image.

use rand::seq::index;
use rand::{Rng as _, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::encoder::NormStats;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{lit, Float, Tensor};

/// Random-resized-crop and flip settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image, sampled uniformly.
    pub scale: (f64, f64),
    /// Crop width/height ratio, sampled uniformly.
    pub ratio: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.3, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
        }
    }
}

const CROP_TRIES: usize = 10;

/// `N` normalized views of one instance; view 0 is the uncropped original.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch<F> {
    pub views: Vec<Tensor<F>>,
    /// Seed of the stream each view was drawn from (0 for the original).
    pub lineage: Vec<u64>,
}

impl<F> ViewBatch<F> {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Builds `n` views of a raw `[C, H, W]` image at `out_size`×`out_size`.
pub fn make_views<F: Float>(
    image: &Tensor<F>,
    n: usize,
    out_size: usize,
    norm: &NormStats,
    aug: &AugmentConfig,
    rng: &mut Rng,
) -> Result<ViewBatch<F>> {
    if n == 0 {
        return Err(Error::invalid("at least one view is required"));
    }
    let shape = image.shape();
    if shape.len() != 3 || out_size == 0 {
        return Err(Error::shape("make_views", shape, &[out_size]));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut views = Vec::with_capacity(n);
    let mut lineage = Vec::with_capacity(n);
    views.push(norm.apply(&resize_crop(image, Crop::full(h, w), out_size, false))?);
    lineage.push(0);
    for _ in 1..n {
        let seed = rng.next_u64();
        let mut view_rng = Rng::seed_from_u64(seed);
        let crop = sample_crop(h, w, aug, &mut view_rng);
        let flip = view_rng.random::<f64>() < aug.flip_prob;
        views.push(norm.apply(&resize_crop(image, crop, out_size, flip))?);
        lineage.push(seed);
    }
    Ok(ViewBatch { views, lineage })
}

/// Axis-aligned crop window in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Crop {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }
}

/// Random resized crop window; falls back to a centered crop after
/// repeated degenerate draws.
pub fn sample_crop(h: usize, w: usize, aug: &AugmentConfig, rng: &mut Rng) -> Crop {
    let area = (h * w) as f64;
    for _ in 0..CROP_TRIES {
        let target = area * rng.random_range(aug.scale.0..=aug.scale.1);
        let ratio = rng.random_range(aug.ratio.0..=aug.ratio.1);
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return Crop {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let side = h.min(w);
    Crop {
        top: (h - side) / 2,
        left: (w - side) / 2,
        height: side,
        width: side,
    }
}

/// Bilinear resize of a crop window (half-pixel centers), optionally
/// mirrored horizontally.
pub fn resize_crop<F: Float>(image: &Tensor<F>, crop: Crop, out: usize, flip: bool) -> Tensor<F> {
    let shape = image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let data = image.data();
    let sy = crop.height as f64 / out as f64;
    let sx = crop.width as f64 / out as f64;
    let mut result = Vec::with_capacity(c * out * out);
    let sample = |ch: usize, y: f64, x: f64| -> F {
        let y = y.clamp(0.0, (crop.height - 1) as f64);
        let x = x.clamp(0.0, (crop.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(crop.height - 1), (x0 + 1).min(crop.width - 1));
        let (fy, fx) = (lit::<F>(y - y0 as f64), lit::<F>(x - x0 as f64));
        let at = |yy: usize, xx: usize| data[ch * h * w + (crop.top + yy) * w + crop.left + xx];
        let top = at(y0, x0) * (F::one() - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (F::one() - fx) + at(y1, x1) * fx;
        top * (F::one() - fy) + bottom * fy
    };
    for ch in 0..c {
        for oy in 0..out {
            let y = (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out {
                let col = if flip { out - 1 - ox } else { ox };
                let x = (col as f64 + 0.5) * sx - 0.5;
                result.push(sample(ch, y, x));
            }
        }
    }
    Tensor::new(&[c, out, out], result).expect("resize shape")
}

/// Patches hidden from the encoder for one masked pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    /// Ascending, distinct, each below the patch count.
    pub masked: Vec<usize>,
}

/// Uniform draw without replacement of `floor(ratio · P)` patch indices.
pub fn sample_mask(num_patches: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSpec> {
    if num_patches == 0 {
        return Err(Error::invalid("cannot mask an image with no patches"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = mask_count(num_patches, ratio);
    let mut masked = index::sample(rng, num_patches, count).into_vec();
    masked.sort_unstable();
    Ok(MaskSpec { ratio, masked })
}

pub fn mask_count(num_patches: usize, ratio: f64) -> usize {
    (ratio * num_patches as f64).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn test_image(seed: u64) -> Tensor<f32> {
        let mut rng = stream(seed, "img");
        Tensor::new(&[3, 32, 32], (0..3 * 32 * 32).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn single_view_is_the_normalized_original() {
        let img = test_image(1);
        let norm = NormStats {
            mean: vec![0.5; 3],
            std: vec![0.25; 3],
        };
        let b = make_views(&img, 1, 32, &norm, &AugmentConfig::default(), &mut stream(1, "v")).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.views[0], norm.apply(&img).unwrap());
    }

    #[test]
    fn views_are_deterministic_per_seed() {
        let img = test_image(2);
        let norm = NormStats::identity(3);
        let a = make_views(&img, 64, 32, &norm, &AugmentConfig::default(), &mut stream(5, "v")).unwrap();
        let b = make_views(&img, 64, 32, &norm, &AugmentConfig::default(), &mut stream(5, "v")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augmented_views_differ_from_the_original() {
        let img = test_image(3);
        let norm = NormStats::identity(3);
        let (mut differ, mut total) = (0, 0);
        for seed in 0..10 {
            let b = make_views(&img, 64, 32, &norm, &AugmentConfig::default(), &mut stream(seed, "v")).unwrap();
            let sum0: f64 = b.views[0].data().iter().map(|&v| v as f64).sum();
            for v in &b.views[1..] {
                let s: f64 = v.data().iter().map(|&v| v as f64).sum();
                differ += usize::from((s - sum0).abs() > 1e-6);
                total += 1;
            }
        }
        let frac = differ as f64 / total as f64;
        assert!(frac > 0.97, "only {differ}/{total} views differ from the original");
    }

    #[test]
    fn zero_views_rejected() {
        let img = test_image(4);
        assert!(make_views(&img, 0, 32, &NormStats::identity(3), &AugmentConfig::default(), &mut stream(0, "v")).is_err());
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = test_image(5);
        assert_eq!(resize_crop(&img, Crop::full(32, 32), 32, false), img);
        let twice = resize_crop(&resize_crop(&img, Crop::full(32, 32), 32, true), Crop::full(32, 32), 32, true);
        assert_eq!(twice, img);
    }

    #[test]
    fn degenerate_crop_falls_back_to_center() {
        let aug = AugmentConfig {
            scale: (4.0, 4.0),
            ..AugmentConfig::default()
        };
        let c = sample_crop(10, 20, &aug, &mut stream(0, "c"));
        assert_eq!(c, Crop { top: 0, left: 5, height: 10, width: 10 });
    }

    #[test]
    fn crops_stay_inside_the_image() {
        let mut rng = stream(6, "c");
        for _ in 0..1000 {
            let c = sample_crop(32, 32, &AugmentConfig::default(), &mut rng);
            assert!(c.height >= 1 && c.width >= 1 && c.top + c.height <= 32 && c.left + c.width <= 32);
        }
    }

    #[test]
    fn mask_hand_values() {
        assert_eq!(sample_mask(196, 0.5, &mut stream(0, "m")).unwrap().masked.len(), 98);
        assert!(sample_mask(16, 0.0, &mut stream(0, "m")).unwrap().masked.is_empty());
        assert!(sample_mask(16, 1.0, &mut stream(0, "m")).is_err());
        assert!(sample_mask(16, -0.1, &mut stream(0, "m")).is_err());
        let mut rng = stream(1, "m");
        for _ in 0..1000 {
            let m = sample_mask(16, 0.75, &mut rng).unwrap().masked;
            assert_eq!(m.len(), 12);
            assert!(m.windows(2).all(|w| w[0] < w[1]) && m.iter().all(|&i| i < 16));
        }
    }
}
