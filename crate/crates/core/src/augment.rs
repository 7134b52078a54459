//! Stochastic two-view augmentation: random resized crop, colour jitter,
//! grayscale and horizontal flip.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::FloatImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    /// Side of the square output, normally the encoder input size.
    pub output_size: usize,
    /// Range of the crop area as a fraction of the source area.
    pub scale: (f64, f64),
    /// Range of crop aspect ratios (width / height), sampled log-uniformly.
    pub ratio: (f64, f64),
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub flip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            output_size: 32,
            scale: (0.5, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            flip_prob: 0.5,
        }
    }
}

impl AugmentParams {
    /// Every stochastic step switched off: both views are the plain resize.
    pub fn identity(output_size: usize) -> Self {
        Self {
            output_size,
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = self.output_size > 0
            && self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1
            && self.scale.1 <= 1.0
            && self.ratio.0 > 0.0
            && self.ratio.0 <= self.ratio.1
            && prob(self.jitter_prob)
            && prob(self.grayscale_prob)
            && prob(self.flip_prob)
            && [self.brightness, self.contrast, self.saturation]
                .iter()
                .all(|v| (0.0..=1.0).contains(v));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid augmentation parameters {self:?}")))
        }
    }
}

/// Two independent augmentations of `image`, deterministic in `seed`.
pub fn augment_views(image: &RgbImage, params: &AugmentParams, seed: u64) -> Result<(FloatImage, FloatImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = FloatImage::from_rgb(image);
    Ok((augment_one(&src, params, &mut rng)?, augment_one(&src, params, &mut rng)?))
}

/// One augmentation drawn from `rng`.
pub fn augment_one<R: Rng>(src: &FloatImage, params: &AugmentParams, rng: &mut R) -> Result<FloatImage> {
    if src.width == 0 || src.height == 0 {
        return Err(Error::invalid("cannot augment an empty image"));
    }
    params.validate()?;
    let (x0, y0, cw, ch) = sample_crop(src.width as f64, src.height as f64, params, rng);
    let flip = params.flip_prob > 0.0 && rng.gen_bool(params.flip_prob);
    let n = params.output_size;
    let mut out = FloatImage {
        width: n,
        height: n,
        data: Vec::with_capacity(n * n * 3),
    };
    for y in 0..n {
        let fy = y0 + (y as f64 + 0.5) * ch / n as f64 - 0.5;
        for x in 0..n {
            let xs = if flip { n - 1 - x } else { x };
            let fx = x0 + (xs as f64 + 0.5) * cw / n as f64 - 0.5;
            for c in 0..3 {
                out.data.push(src.sample(fx, fy, c));
            }
        }
    }
    if params.jitter_prob > 0.0 && rng.gen_bool(params.jitter_prob) {
        let b = factor(rng, params.brightness);
        let c = factor(rng, params.contrast);
        let s = factor(rng, params.saturation);
        color_jitter(&mut out, b, c, s);
    }
    if params.grayscale_prob > 0.0 && rng.gen_bool(params.grayscale_prob) {
        for px in out.data.chunks_exact_mut(3) {
            let l = luma(px);
            px.fill(l);
        }
    }
    Ok(out)
}

fn factor<R: Rng>(rng: &mut R, strength: f64) -> f64 {
    if strength > 0.0 {
        rng.gen_range(1.0 - strength..=1.0 + strength)
    } else {
        1.0
    }
}

fn luma(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn color_jitter(img: &mut FloatImage, brightness: f64, contrast: f64, saturation: f64) {
    let clamp = |v: f64| v.clamp(0.0, 255.0);
    img.data.iter_mut().for_each(|v| *v = clamp(*v * brightness));
    let mean = img.data.chunks_exact(3).map(luma).sum::<f64>() / (img.width * img.height) as f64;
    img.data.iter_mut().for_each(|v| *v = clamp((*v - mean) * contrast + mean));
    for px in img.data.chunks_exact_mut(3) {
        let l = luma(px);
        px.iter_mut().for_each(|v| *v = clamp((*v - l) * saturation + l));
    }
}

/// Crop box `(x0, y0, w, h)` in source pixel units. Falls back to the full
/// image when no sampled box fits.
fn sample_crop<R: Rng>(w: f64, h: f64, params: &AugmentParams, rng: &mut R) -> (f64, f64, f64, f64) {
    if params.scale == (1.0, 1.0) {
        return (0.0, 0.0, w, h);
    }
    let area = w * h;
    let (lr0, lr1) = (params.ratio.0.ln(), params.ratio.1.ln());
    for _ in 0..10 {
        let s = rng.gen_range(params.scale.0..=params.scale.1);
        let r = if lr0 < lr1 { rng.gen_range(lr0..lr1).exp() } else { params.ratio.0 };
        let cw = (s * area * r).sqrt();
        let ch = (s * area / r).sqrt();
        if cw <= w && ch <= h {
            let x0 = rng.gen_range(0.0..=w - cw);
            let y0 = rng.gen_range(0.0..=h - ch);
            return (x0, y0, cw, ch);
        }
    }
    (0.0, 0.0, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::resize_bilinear;

    fn gradient_image() -> RgbImage {
        RgbImage::from_fn(40, 30, |x, y| image::Rgb([(x * 6) as u8, (y * 8) as u8, ((x + y) * 3) as u8]))
    }

    #[test]
    fn degenerate_params_resize_only() {
        let img = gradient_image();
        let (a, b) = augment_views(&img, &AugmentParams::identity(16), 9).unwrap();
        let expected = resize_bilinear(&FloatImage::from_rgb(&img), 16, 16);
        assert_eq!(a, expected);
        assert_eq!(b, expected);
    }

    #[test]
    fn deterministic_per_seed() {
        let img = gradient_image();
        let p = AugmentParams::default();
        assert_eq!(augment_views(&img, &p, 4).unwrap(), augment_views(&img, &p, 4).unwrap());
    }

    #[test]
    fn default_views_differ() {
        let img = gradient_image();
        let p = AugmentParams::default();
        let differing = (0..50)
            .filter(|&s| {
                let (a, b) = augment_views(&img, &p, s).unwrap();
                a != b
            })
            .count();
        assert_eq!(differing, 50);
    }

    #[test]
    fn output_in_range_and_sized() {
        let img = gradient_image();
        let (a, _) = augment_views(&img, &AugmentParams::default(), 1).unwrap();
        assert_eq!((a.width, a.height), (32, 32));
        assert!(a.data.iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = gradient_image();
        let mut p = AugmentParams::identity(8);
        p.flip_prob = 1.0;
        let (a, _) = augment_views(&img, &p, 0).unwrap();
        let plain = resize_bilinear(&FloatImage::from_rgb(&img), 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(a.get(x, y, 0), plain.get(7 - x, y, 0));
            }
        }
    }

    #[test]
    fn rejects_empty_and_bad_params() {
        let empty = RgbImage::new(0, 0);
        assert!(augment_views(&empty, &AugmentParams::default(), 0).is_err());
        let mut p = AugmentParams::default();
        p.flip_prob = 2.0;
        assert!(augment_views(&gradient_image(), &p, 0).is_err());
    }
}
