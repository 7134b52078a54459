use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{downsample_area, gaussian_blur, resize_bilinear, FloatImage};

/// Parameters of the robot-camera quality model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub blur_sigma: f64,
    /// Odd kernel width in pixels.
    pub blur_kernel: usize,
    pub downsample_factor: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            blur_kernel: 1,
            downsample_factor: 1,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel % 2 == 0 {
            return Err(Error::invalid("blur kernel must be odd"));
        }
        if self.downsample_factor < 1 {
            return Err(Error::invalid("downsample factor must be >= 1"));
        }
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("sigmas must be non-negative"));
        }
        Ok(())
    }
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            blur_sigma: 2.0,
            blur_kernel: 9,
            downsample_factor: 4,
            noise_sigma: 5.0,
            seed: 0,
        }
    }
}

/// Blur, then drop resolution and restore the original size, then add
/// Gaussian sensor noise.
pub fn degrade(image: &RgbImage, spec: &DegradationSpec) -> Result<RgbImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::invalid("image is empty"));
    }
    spec.validate()?;
    let mut img = FloatImage::from_rgb(image);
    if spec.blur_sigma > 0.0 && spec.blur_kernel > 1 {
        img = gaussian_blur(&img, spec.blur_sigma, spec.blur_kernel);
    }
    if spec.downsample_factor > 1 {
        let (w, h) = (img.width, img.height);
        img = resize_bilinear(&downsample_area(&img, spec.downsample_factor), w, h);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        img.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(img.to_rgb())
}
