use rand::Rng;

use super::Sample;
use crate::engine::{Shape4, Tensor4};

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(t: &Tensor4<f32>, h: usize, w: usize) -> Tensor4<f32> {
    let s = t.shape();
    if (s.h, s.w) == (h, w) {
        return t.clone();
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h, s.h);
    let xs = axis(w, s.w);
    Tensor4::from_fn(s.with_hw(h, w), |n, c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = t.at(n, c, y0, x0) * (1.0 - fx) + t.at(n, c, y0, x1) * fx;
        let bottom = t.at(n, c, y1, x0) * (1.0 - fx) + t.at(n, c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resize; output pixel centers map back to the source
/// pixel containing them.
pub fn resize_nearest(t: &Tensor4<f32>, h: usize, w: usize) -> Tensor4<f32> {
    let s = t.shape();
    let pick = |i: usize, out: usize, len: usize| ((2 * i + 1) * len / (2 * out)).min(len - 1);
    Tensor4::from_fn(s.with_hw(h, w), |n, c, y, x| {
        t.at(n, c, pick(y, h, s.h), pick(x, w, s.w))
    })
}

/// Nearest resize followed by a 0.5 threshold, so the result is `{0, 1}`.
pub fn resize_mask(t: &Tensor4<f32>, h: usize, w: usize) -> Tensor4<f32> {
    binarize(&resize_nearest(t, h, w))
}

pub fn binarize(t: &Tensor4<f32>) -> Tensor4<f32> {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

pub fn flip_horizontal(t: &Tensor4<f32>) -> Tensor4<f32> {
    let w = t.shape().w;
    Tensor4::from_fn(t.shape(), |n, c, y, x| t.at(n, c, y, w - 1 - x))
}

pub fn flip_vertical(t: &Tensor4<f32>) -> Tensor4<f32> {
    let h = t.shape().h;
    Tensor4::from_fn(t.shape(), |n, c, y, x| t.at(n, c, h - 1 - y, x))
}

pub fn crop(t: &Tensor4<f32>, top: usize, left: usize, h: usize, w: usize) -> Tensor4<f32> {
    let s = t.shape();
    assert!(top + h <= s.h && left + w <= s.w, "crop window outside {s}");
    Tensor4::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, x| {
        t.at(n, c, top + y, left + x)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Side of the random crop as a fraction of the input side; `1.0`
    /// disables cropping.
    pub crop_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            vflip_prob: 0.0,
            crop_frac: 0.875,
        }
    }
}

/// Random flip and crop-then-resize with identical geometry for image and
/// mask.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if rng.gen_bool(cfg.hflip_prob.clamp(0.0, 1.0)) {
        image = flip_horizontal(&image);
        mask = flip_horizontal(&mask);
    }
    if rng.gen_bool(cfg.vflip_prob.clamp(0.0, 1.0)) {
        image = flip_vertical(&image);
        mask = flip_vertical(&mask);
    }
    let s = image.shape();
    let ch = ((s.h as f64 * cfg.crop_frac).round() as usize).clamp(1, s.h);
    let cw = ((s.w as f64 * cfg.crop_frac).round() as usize).clamp(1, s.w);
    if (ch, cw) != (s.h, s.w) {
        let top = rng.gen_range(0..=s.h - ch);
        let left = rng.gen_range(0..=s.w - cw);
        image = resize_bilinear(&crop(&image, top, left, ch, cw), s.h, s.w);
        mask = resize_mask(&crop(&mask, top, left, ch, cw), s.h, s.w);
    }
    Sample {
        image,
        mask,
        id: sample.id.clone(),
    }
}
