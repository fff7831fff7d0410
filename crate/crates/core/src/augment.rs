//! Stochastic view generation for single-channel scans.
//!
//! Stage order: brightness/contrast jitter, rotation, central crop, horizontal
//! flip, random resized crop. Colour-only transforms (hue, saturation, colour
//! dropping, solarisation) and blur have no place here.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub jitter_probability: f64,
    /// Maximum relative change of brightness and of contrast.
    pub jitter_strength: f64,
    pub max_rotation_degrees: f64,
    /// `[height, width]` of the central crop applied after rotation.
    pub center_crop: [usize; 2],
    pub flip_probability: f64,
    /// Area fraction range of the random resized crop.
    pub crop_scale: [f64; 2],
    /// Width/height ratio range of the random resized crop.
    pub crop_aspect: [f64; 2],
    /// `[height, width]` of the final view.
    pub output_size: [usize; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_probability: 0.8,
            jitter_strength: 0.4,
            max_rotation_degrees: 8.0,
            center_crop: [188, 236],
            flip_probability: 0.5,
            crop_scale: [0.25, 1.0],
            crop_aspect: [3.0 / 4.0, 4.0 / 3.0],
            output_size: [192, 192],
        }
    }
}

impl AugmentConfig {
    /// Desk-scale geometry for small synthetic scans (32x32 in, 24x24 views).
    pub fn desk(image_size: usize) -> Self {
        let crop = image_size - image_size / 8;
        let out = image_size - image_size / 4;
        Self { center_crop: [crop, crop], output_size: [out, out], ..Self::default() }
    }

    /// Configuration with every random stage disabled.
    pub fn deterministic(&self) -> Self {
        Self {
            jitter_probability: 0.0,
            max_rotation_degrees: 0.0,
            flip_probability: 0.0,
            crop_scale: [1.0, 1.0],
            crop_aspect: [1.0, 1.0],
            ..self.clone()
        }
    }

    /// The milder variant used while finetuning: half the jitter and rotation,
    /// crops covering at least 70% of the area.
    pub fn weakened(&self) -> Self {
        Self {
            jitter_strength: self.jitter_strength / 2.0,
            max_rotation_degrees: self.max_rotation_degrees / 2.0,
            crop_scale: [self.crop_scale[0].max(0.7), self.crop_scale[1]],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !prob(self.jitter_probability) || !prob(self.flip_probability) {
            return Err(Error::InvalidConfig("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.jitter_strength) || !(self.max_rotation_degrees >= 0.0) {
            return Err(Error::InvalidConfig("jitter strength must lie in [0, 1) and rotation be >= 0".into()));
        }
        if !range(self.crop_scale) || self.crop_scale[1] > 1.0 || !range(self.crop_aspect) {
            return Err(Error::InvalidConfig("crop scale/aspect ranges must be nonempty and positive".into()));
        }
        if self.center_crop.contains(&0) || self.output_size.contains(&0) {
            return Err(Error::InvalidConfig("crop and output sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn output_len(&self) -> usize {
        self.output_size[0] * self.output_size[1]
    }
}

/// Multiplies every pixel by `factor`.
pub fn adjust_brightness(image: &GrayImage, factor: f64) -> GrayImage {
    image.map(|v| (v * factor).clamp(0.0, 1.0))
}

/// Scales deviations from the image mean by `factor`.
pub fn adjust_contrast(image: &GrayImage, factor: f64) -> GrayImage {
    let mean = image.mean();
    image.map(|v| (mean + factor * (v - mean)).clamp(0.0, 1.0))
}

/// Crop box `(top, left, height, width)` for a random resized crop.
///
/// Falls back to the whole image when ten draws fail to fit.
fn resized_crop_box(rng: &mut impl Rng, height: usize, width: usize, scale: [f64; 2], aspect: [f64; 2]) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (aspect[0].ln(), aspect[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale[0], scale[1]);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    (0, 0, height, width)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Produces one contrastive view. Deterministic in `(image, cfg, seed)`.
pub fn augment(image: &GrayImage, cfg: &AugmentConfig, seed: u64) -> Result<GrayImage> {
    let [ch, cw] = cfg.center_crop;
    if image.height() < ch || image.width() < cw {
        return Err(Error::ImageTooSmall { height: image.height(), width: image.width(), min_height: ch, min_width: cw });
    }
    let mut rng = rng_for(seed, &[]);

    let mut view = image.clone();
    if rng.random_bool(cfg.jitter_probability) {
        let s = cfg.jitter_strength;
        let brightness = uniform(&mut rng, 1.0 - s, 1.0 + s);
        let contrast = uniform(&mut rng, 1.0 - s, 1.0 + s);
        view = adjust_contrast(&adjust_brightness(&view, brightness), contrast);
    }

    let angle = uniform(&mut rng, -cfg.max_rotation_degrees, cfg.max_rotation_degrees);
    view = view.rotate(angle);

    view = view.center_crop(ch, cw)?;

    if rng.random_bool(cfg.flip_probability) {
        view = view.flip_horizontal();
    }

    let (top, left, h, w) = resized_crop_box(&mut rng, ch, cw, cfg.crop_scale, cfg.crop_aspect);
    view = view.crop(top, left, h, w)?;
    Ok(view.resize(cfg.output_size[0], cfg.output_size[1]).clamped())
}

/// [`augment`] with the weakened configuration.
pub fn finetune_augment(image: &GrayImage, cfg: &AugmentConfig, seed: u64) -> Result<GrayImage> {
    augment(image, &cfg.weakened(), seed)
}

/// The evaluation view: central crop resized to the output size, no randomness.
pub fn eval_view(image: &GrayImage, cfg: &AugmentConfig) -> Result<GrayImage> {
    let [ch, cw] = cfg.center_crop;
    Ok(image.center_crop(ch, cw)?.resize(cfg.output_size[0], cfg.output_size[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan(h: usize, w: usize) -> GrayImage {
        GrayImage::from_fn(h, w, |y, x| 0.5 + 0.4 * ((y as f64 * 0.3).sin() * (x as f64 * 0.17).cos()))
    }

    #[test]
    fn degenerate_config_is_center_crop_resize() {
        let img = scan(208, 256);
        let cfg = AugmentConfig::default().deterministic();
        let out = augment(&img, &cfg, 11).unwrap();
        let expected = img.center_crop(188, 236).unwrap().resize(192, 192);
        assert_eq!(out, expected);
        assert_eq!(finetune_augment(&img, &cfg, 5).unwrap(), expected);
        assert_eq!(eval_view(&img, &cfg).unwrap(), expected);
    }

    #[test]
    fn output_shape_and_range() {
        let img = scan(208, 256);
        let cfg = AugmentConfig::default();
        for seed in 0..5 {
            let out = augment(&img, &cfg, seed).unwrap();
            assert_eq!((out.height(), out.width()), (192, 192));
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let img = scan(40, 40);
        let cfg = AugmentConfig::desk(40);
        assert_eq!(augment(&img, &cfg, 3).unwrap(), augment(&img, &cfg, 3).unwrap());
        assert_ne!(augment(&img, &cfg, 3).unwrap(), augment(&img, &cfg, 4).unwrap());
    }

    #[test]
    fn rejects_small_images() {
        let img = scan(100, 100);
        assert!(matches!(augment(&img, &AugmentConfig::default(), 0), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn jitter_clamps() {
        let img = GrayImage::filled(3, 3, 0.9);
        assert!(adjust_brightness(&img, 1.4).pixels().iter().all(|&v| v == 1.0));
        let mixed = GrayImage::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(adjust_contrast(&mixed, 1.4).pixels(), &[0.0, 1.0]);
        assert_eq!(adjust_contrast(&mixed, 0.5).pixels(), &[0.25, 0.75]);
    }

    #[test]
    fn weakened_halves_magnitudes() {
        let w = AugmentConfig::default().weakened();
        assert_eq!(w.jitter_strength, 0.2);
        assert_eq!(w.max_rotation_degrees, 4.0);
        assert_eq!(w.crop_scale, [0.7, 1.0]);
        assert!(w.validate().is_ok());
    }

    #[test]
    fn forced_flip_twice_is_identity() {
        let img = scan(32, 32);
        let flip_only = AugmentConfig { flip_probability: 1.0, ..AugmentConfig::desk(32).deterministic() };
        let once = augment(&img, &flip_only, 0).unwrap();
        let plain = augment(&img, &AugmentConfig::desk(32).deterministic(), 0).unwrap();
        let restored = once.flip_horizontal();
        for (a, b) in restored.pixels().iter().zip(plain.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
