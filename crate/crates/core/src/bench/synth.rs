//! Procedural shapes on textured backgrounds, and the corruptions that
//! shift them away from the training distribution.
//!
//! Severity schedules (index = severity − 1):
//!
//! | shift            | parameter                         | 1    | 2    | 3    | 4    | 5    |
//! |------------------|-----------------------------------|------|------|------|------|------|
//! | `gaussian_noise` | noise std                         | 0.08 | 0.12 | 0.18 | 0.26 | 0.38 |
//! | `blur`           | gaussian kernel std (pixels)      | 1.0  | 1.5  | 2.2  | 3.0  | 4.0  |
//! | `color_shift`    | desaturation / cast magnitude     | 0.2/0.06 | 0.35/0.1 | 0.5/0.14 | 0.65/0.18 | 0.8/0.22 |
//! | `occlusion`      | occluders × side (pixels)         | 1×9  | 2×9  | 2×11 | 3×11 | 3×13 |

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
const RGB: [[f32; 3]; 4] = [[0.86, 0.16, 0.14], [0.16, 0.74, 0.22], [0.16, 0.3, 0.9], [0.92, 0.84, 0.14]];

/// Largest offset of a shape's center from the image center, in pixels.
const JITTER: f32 = 4.0;

const PREFIXES: [&str; 6] = ["a photo of a", "a picture of a", "a drawing of a", "an image of a", "a", "the"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    GaussianNoise,
    Blur,
    ColorShift,
    Occlusion,
}

impl ShiftKind {
    /// The four corruptions, without the identity.
    pub const CORRUPTIONS: [ShiftKind; 4] =
        [ShiftKind::GaussianNoise, ShiftKind::Blur, ShiftKind::ColorShift, ShiftKind::Occlusion];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::None => "none",
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::Blur => "blur",
            ShiftKind::ColorShift => "color_shift",
            ShiftKind::Occlusion => "occlusion",
        }
    }
}

/// Largest class count the shape × color grammar can name.
pub fn max_classes() -> usize {
    SHAPES.len() * COLORS.len()
}

/// `"red circle"`, `"red square"`, …, shapes varying fastest.
pub fn class_name(label: usize) -> String {
    format!("{} {}", COLORS[(label / SHAPES.len()) % COLORS.len()], SHAPES[label % SHAPES.len()])
}

/// Instance attributes a caption may mention, so that captions of the
/// same class still differ the way real alt-text does.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attributes {
    pub radius: f32,
    pub background: f32,
}

/// `"<prefix> [small|large] <class> [on a dark|bright background]"`.
pub fn caption(label: usize, attrs: Attributes, rng: &mut Rng) -> String {
    let mut words = vec![PREFIXES[rng.random_range(0..PREFIXES.len())].to_string()];
    if rng.random::<f64>() < 0.7 {
        if attrs.radius < 7.5 {
            words.push("small".into());
        } else if attrs.radius > 9.5 {
            words.push("large".into());
        }
    }
    words.push(class_name(label));
    if rng.random::<f64>() < 0.7 {
        if attrs.background < 0.4 {
            words.push("on a dark background".into());
        } else if attrs.background > 0.55 {
            words.push("on a bright background".into());
        }
    }
    words.join(" ")
}

fn inside(shape: usize, x: f32, y: f32) -> bool {
    match shape {
        0 => x * x + y * y <= 1.0,
        1 => x.abs().max(y.abs()) <= 0.8,
        2 => (-0.8..=0.8).contains(&y) && x.abs() <= (y + 0.8) / 1.6 * 0.95,
        3 => (x.abs() <= 0.3 && y.abs() <= 0.95) || (y.abs() <= 0.3 && x.abs() <= 0.95),
        _ => (0.3..=1.0).contains(&(x * x + y * y)),
    }
}

fn background(rng: &mut Rng) -> (Vec<f32>, f32) {
    let n = IMAGE_SIZE;
    let base: f32 = rng.random_range(0.25..0.7);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.07..0.07));
    let amp: f32 = rng.random_range(0.04..0.12);
    let kind = rng.random_range(0..3);
    let freq: f32 = rng.random_range(0.25..0.9);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let period = rng.random_range(3..8);
    // coarse value-noise lattice, bilinearly upsampled
    let grid: Vec<f32> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let t = match kind {
                0 => ((x as f32 * ca + y as f32 * sa) * freq).sin(),
                1 => {
                    if (x / period + y / period) % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                _ => {
                    let (gx, gy) = (x as f32 / (n as f32) * 4.0, y as f32 / (n as f32) * 4.0);
                    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                    let (fx, fy) = (gx - x0 as f32, gy - y0 as f32);
                    let g = |i: usize, j: usize| grid[j * 5 + i];
                    let top = g(x0, y0) * (1.0 - fx) + g(x0 + 1, y0) * fx;
                    let bot = g(x0, y0 + 1) * (1.0 - fx) + g(x0 + 1, y0 + 1) * fx;
                    top * (1.0 - fy) + bot * fy
                }
            };
            for c in 0..3 {
                let grain: f32 = rng.random_range(-0.02..0.02);
                out[c * n * n + y * n + x] = base + tint[c] + amp * t + grain;
            }
        }
    }
    (out, base)
}

/// Renders one raw `[3, 32, 32]` image of class `label` with pixels in `[0, 1]`.
pub fn render(label: usize, rng: &mut Rng) -> (Tensor<f32>, Attributes) {
    let n = IMAGE_SIZE;
    let (mut img, background) = background(rng);
    let shape = label % SHAPES.len();
    let color = RGB[(label / SHAPES.len()) % COLORS.len()];
    let radius: f32 = rng.random_range(7.0..11.0);
    let half = n as f32 / 2.0;
    let cx: f32 = half + rng.random_range(-JITTER..JITTER);
    let cy: f32 = half + rng.random_range(-JITTER..JITTER);
    let gain: f32 = rng.random_range(0.8..1.1);
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
    let fill: [f32; 3] = std::array::from_fn(|c| color[c] * gain + jitter[c]);
    for y in 0..n {
        for x in 0..n {
            // 2×2 supersampled coverage
            let mut cover = 0.0;
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let u = (x as f32 + sx - cx) / radius;
                let v = (y as f32 + sy - cy) / radius;
                if inside(shape, u, v) {
                    cover += 0.25;
                }
            }
            if cover > 0.0 {
                for c in 0..3 {
                    let p = &mut img[c * n * n + y * n + x];
                    *p = *p * (1.0 - cover) + fill[c] * cover;
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    (Tensor::new(&[3, n, n], img).expect("image shape"), Attributes { radius, background })
}

fn gaussian_blur(img: &mut [f32], sigma: f32) {
    let n = IMAGE_SIZE;
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let at = |i: isize| i.clamp(0, n as isize - 1) as usize;
    for plane in img.chunks_mut(n * n) {
        let src = plane.to_vec();
        for y in 0..n {
            for x in 0..n {
                let s: f32 = (-radius..=radius)
                    .map(|k| kernel[(k + radius) as usize] * src[y * n + at(x as isize + k)])
                    .sum();
                plane[y * n + x] = s / norm;
            }
        }
        let src = plane.to_vec();
        for y in 0..n {
            for x in 0..n {
                let s: f32 = (-radius..=radius)
                    .map(|k| kernel[(k + radius) as usize] * src[at(y as isize + k) * n + x])
                    .sum();
                plane[y * n + x] = s / norm;
            }
        }
    }
}

/// Applies `kind` at `severity` (0 is the identity, otherwise 1 to 5).
pub fn apply_shift(image: &Tensor<f32>, kind: ShiftKind, severity: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    if severity > 5 {
        return Err(Error::invalid(format!("shift severity {severity} outside 0..=5")));
    }
    if severity == 0 || kind == ShiftKind::None {
        return Ok(image.clone());
    }
    let s = severity - 1;
    let n = IMAGE_SIZE;
    let mut out = image.clone();
    let px = out.data_mut();
    match kind {
        ShiftKind::None => {}
        ShiftKind::GaussianNoise => {
            let std = [0.08, 0.12, 0.18, 0.26, 0.38][s];
            let dist = Normal::new(0.0f32, std).expect("positive std");
            px.iter_mut().for_each(|v| *v += dist.sample(rng));
        }
        ShiftKind::Blur => gaussian_blur(px, [1.0, 1.5, 2.2, 3.0, 4.0][s]),
        ShiftKind::ColorShift => {
            let alpha = [0.2, 0.35, 0.5, 0.65, 0.8][s];
            let mag = [0.06, 0.1, 0.14, 0.18, 0.22][s];
            let dir: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0f32..1.0));
            let len = dir.iter().map(|d| d * d).sum::<f32>().sqrt().max(1e-6);
            let cast: [f32; 3] = std::array::from_fn(|c| dir[c] / len * mag);
            for i in 0..n * n {
                let gray = (px[i] + px[n * n + i] + px[2 * n * n + i]) / 3.0;
                for c in 0..3 {
                    let v = &mut px[c * n * n + i];
                    *v = alpha * gray + (1.0 - alpha) * *v + cast[c];
                }
            }
        }
        ShiftKind::Occlusion => {
            let (count, side) = [(1, 9), (2, 9), (2, 11), (3, 11), (3, 13)][s];
            for _ in 0..count {
                let top = rng.random_range(0..=n - side);
                let left = rng.random_range(0..=n - side);
                let level: f32 = rng.random_range(0.0..1.0);
                for y in top..top + side {
                    for x in left..left + side {
                        let grain: f32 = rng.random_range(-0.05..0.05);
                        for c in 0..3 {
                            px[c * n * n + y * n + x] = level + grain;
                        }
                    }
                }
            }
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}
