//! Negative ("novelty-like") sample generation.
//!
//! Each negative is a random resized crop, colour jitter, optional grayscale,
//! optional horizontal flip and optional quarter-turn rotation of its positive,
//! applied in that order and driven by a ChaCha8 stream seeded per sample.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Fraction of the image area kept by the crop, sampled uniformly in `(low, high)`.
    pub crop_scale_range: (f32, f32),
    /// Brightness/contrast/saturation factors are drawn from `1 ± strength`; hue shift from `±strength/4`.
    pub jitter_strength: f32,
    pub grayscale_prob: f32,
    pub flip_prob: f32,
    /// Degrees; multiples of 90 only.
    pub rotation_angles: Vec<u32>,
    pub rotation_prob: f32,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.2, 1.0),
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            flip_prob: 0.5,
            rotation_angles: vec![90, 180, 270],
            rotation_prob: 0.5,
        }
    }
}

impl AugmentationPolicy {
    /// A policy that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            flip_prob: 0.0,
            rotation_angles: Vec::new(),
            rotation_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale_range must satisfy 0 < low <= high <= 1, got ({lo}, {hi})")));
        }
        for (name, p) in [
            ("grayscale_prob", self.grayscale_prob),
            ("flip_prob", self.flip_prob),
            ("rotation_prob", self.rotation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.jitter_strength >= 0.0 && self.jitter_strength < 1.0) {
            return Err(Error::Config(format!("jitter_strength must lie in [0, 1), got {}", self.jitter_strength)));
        }
        if let Some(a) = self.rotation_angles.iter().find(|a| **a % 90 != 0) {
            return Err(Error::Config(format!("rotation angle {a} is not a multiple of 90")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub positive: ImageSample,
    pub negative: ImageSample,
}

/// Produces the negative view of `x`. Deterministic in `(x, policy, seed)`.
pub fn negative_augment(x: &ImageSample, policy: &AugmentationPolicy, seed: u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = random_resized_crop(&x.pixels, policy.crop_scale_range, &mut rng);
    if policy.jitter_strength > 0.0 {
        color_jitter(&mut px, policy.jitter_strength, &mut rng);
    }
    if rng.gen::<f32>() < policy.grayscale_prob {
        grayscale(&mut px);
    }
    if rng.gen::<f32>() < policy.flip_prob {
        px.invert_axis(ndarray::Axis(2));
        px = px.as_standard_layout().to_owned();
    }
    if rng.gen::<f32>() < policy.rotation_prob && !policy.rotation_angles.is_empty() {
        let angle = policy.rotation_angles[rng.gen_range(0..policy.rotation_angles.len())];
        px = rotate_quarter(&px, (angle / 90) % 4);
    }
    px.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    ImageSample {
        id: format!("{}~neg", x.id),
        label: x.label,
        pixels: px,
    }
}

/// Pairs every positive with its own negative; sample `i` uses seed `seed ^ i`.
pub fn make_pair_batch(xs: &[ImageSample], policy: &AugmentationPolicy, seed: u64) -> Vec<AugmentedPair> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| AugmentedPair {
            positive: x.clone(),
            negative: negative_augment(x, policy, seed ^ i as u64),
        })
        .collect()
}

fn random_resized_crop(px: &Array3<f32>, (lo, hi): (f32, f32), rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (_, h, w) = px.dim();
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let log_ratio = rng.gen_range((3.0f32 / 4.0).ln()..=(4.0f32 / 3.0).ln());
    let area = scale * (h * w) as f32;
    let mut cw = (area * log_ratio.exp()).sqrt().round() as usize;
    let mut ch = (area / log_ratio.exp()).sqrt().round() as usize;
    if cw > w || ch > h {
        // aspect ratio does not fit: square crop of the same area
        let side = area.sqrt().round() as usize;
        cw = side;
        ch = side;
    }
    let cw = cw.clamp(1, w);
    let ch = ch.clamp(1, h);
    let x0 = rng.gen_range(0..=w - cw);
    let y0 = rng.gen_range(0..=h - ch);
    if cw == w && ch == h {
        return px.clone();
    }
    resize_bilinear(px, y0, x0, ch, cw, h, w)
}

/// Bilinear resample of the window `(y0, x0, ch, cw)` to `oh × ow`, sampling at pixel centres.
fn resize_bilinear(px: &Array3<f32>, y0: usize, x0: usize, ch: usize, cw: usize, oh: usize, ow: usize) -> Array3<f32> {
    let c = px.dim().0;
    let sy = ch as f32 / oh as f32;
    let sx = cw as f32 / ow as f32;
    let coord = |dst: usize, s: f32, n: usize| -> (usize, usize, f32) {
        let src = ((dst as f32 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f32)
    };
    let mut out = Array3::zeros((c, oh, ow));
    for oy in 0..oh {
        let (ya, yb, fy) = coord(oy, sy, ch);
        for ox in 0..ow {
            let (xa, xb, fx) = coord(ox, sx, cw);
            for k in 0..c {
                let p = |y: usize, x: usize| px[[k, y0 + y, x0 + x]];
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bot = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                out[[k, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter(px: &mut Array3<f32>, strength: f32, rng: &mut ChaCha8Rng) {
    let brightness = rng.gen_range(1.0 - strength..=1.0 + strength);
    let contrast = rng.gen_range(1.0 - strength..=1.0 + strength);
    let saturation = rng.gen_range(1.0 - strength..=1.0 + strength);
    let hue_max = strength / 4.0;
    let hue = rng.gen_range(-hue_max..=hue_max);

    // work in [0, 1]
    px.mapv_inplace(|v| ((v + 1.0) * 0.5 * brightness).clamp(0.0, 1.0));
    let c = px.dim().0;
    let mean_gray = if c == 3 {
        let (_, h, w) = px.dim();
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                s += luma(px[[0, y, x]], px[[1, y, x]], px[[2, y, x]]);
            }
        }
        s / (h * w) as f32
    } else {
        px.mean().unwrap_or(0.0)
    };
    px.mapv_inplace(|v| ((v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0));
    if c == 3 {
        let (_, h, w) = px.dim();
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = (px[[0, y, x]], px[[1, y, x]], px[[2, y, x]]);
                let l = luma(r, g, b);
                let mut rgb = [r, g, b].map(|v| (l + (v - l) * saturation).clamp(0.0, 1.0));
                if hue != 0.0 {
                    rgb = shift_hue(rgb, hue);
                }
                for k in 0..3 {
                    px[[k, y, x]] = rgb[k];
                }
            }
        }
    }
    px.mapv_inplace(|v| v * 2.0 - 1.0);
}

fn shift_hue([r, g, b]: [f32; 3], shift: f32) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return [r, g, b];
    }
    let mut h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    h = (h + shift).rem_euclid(1.0);
    let s = delta / max;
    let v = max;
    let hh = h * 6.0;
    let i = hh.floor();
    let f = hh - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn grayscale(px: &mut Array3<f32>) {
    let (c, h, w) = px.dim();
    if c != 3 {
        return;
    }
    for y in 0..h {
        for x in 0..w {
            let l = luma(px[[0, y, x]], px[[1, y, x]], px[[2, y, x]]);
            for k in 0..3 {
                px[[k, y, x]] = l;
            }
        }
    }
}

/// Counter-clockwise rotation by `quarters × 90°`. Non-square images only take the half turn.
fn rotate_quarter(px: &Array3<f32>, quarters: u32) -> Array3<f32> {
    let (c, h, w) = px.dim();
    let quarters = if h != w && quarters % 2 == 1 { 2 } else { quarters };
    match quarters {
        0 => px.clone(),
        1 => Array3::from_shape_fn((c, w, h), |(k, y, x)| px[[k, x, w - 1 - y]]),
        2 => Array3::from_shape_fn((c, h, w), |(k, y, x)| px[[k, h - 1 - y, w - 1 - x]]),
        _ => Array3::from_shape_fn((c, w, h), |(k, y, x)| px[[k, h - 1 - x, y]]),
    }
}
