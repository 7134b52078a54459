//! Small raster helpers shared by the world generator, the adapters and the
//! augmentation pipeline. Images are `image::RgbImage`; intermediate
//! processing happens on interleaved `f64` buffers.

use image::RgbImage;

/// Interleaved RGB float buffer, values nominally in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f64).collect(),
        }
    }

    /// Rounds and clamps into bytes.
    pub fn to_rgb(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches dimensions")
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y, c)
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// integer positions), edges clamped.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let ax = x - x0;
        let ay = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = self.get_clamped(x0, y0, c) * (1.0 - ax) + self.get_clamped(x0 + 1, y0, c) * ax;
        let bottom = self.get_clamped(x0, y0 + 1, c) * (1.0 - ax) + self.get_clamped(x0 + 1, y0 + 1, c) * ax;
        top * (1.0 - ay) + bottom * ay
    }
}

/// Normalised 1D Gaussian taps.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with clamp-to-edge borders.
pub fn convolve_separable(img: &FloatImage, kernel: &[f64]) -> FloatImage {
    let half = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    acc += k * img.get_clamped(x as isize + i as isize - half, y as isize, c);
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let tmp = FloatImage {
        width: w,
        height: h,
        data: tmp,
    };
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    acc += k * tmp.get_clamped(x as isize, y as isize + i as isize - half, c);
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    FloatImage {
        width: w,
        height: h,
        data: out,
    }
}

pub fn gaussian_blur(img: &FloatImage, sigma: f64, kernel_size: usize) -> FloatImage {
    convolve_separable(img, &gaussian_kernel(sigma, kernel_size))
}

/// Area-average downsampling by an integer factor (partial edge blocks are
/// averaged over the pixels they contain).
pub fn downsample_area(img: &FloatImage, factor: usize) -> FloatImage {
    let w = img.width.div_ceil(factor);
    let h = img.height.div_ceil(factor);
    let mut data = vec![0.0; w * h * 3];
    for by in 0..h {
        for bx in 0..w {
            let ys = by * factor..((by + 1) * factor).min(img.height);
            let xs = bx * factor..((bx + 1) * factor).min(img.width);
            let n = (ys.len() * xs.len()) as f64;
            for c in 0..3 {
                let mut acc = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += img.get(x, y, c);
                    }
                }
                data[(by * w + bx) * 3 + c] = acc / n;
            }
        }
    }
    FloatImage {
        width: w,
        height: h,
        data,
    }
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize_bilinear(img: &FloatImage, width: usize, height: usize) -> FloatImage {
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..width {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            for c in 0..3 {
                data.push(img.sample(fx, fy, c));
            }
        }
    }
    FloatImage { width, height, data }
}

/// Peak signal-to-noise ratio in dB; infinite for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions(), "psnr needs equal dimensions");
    let mse = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.as_raw().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

/// Mean gradient magnitude of the luminance (central differences), used as
/// a sharpness score.
pub fn mean_gradient_magnitude(img: &RgbImage) -> f64 {
    let f = FloatImage::from_rgb(img);
    let luma = |x: isize, y: isize| {
        0.299 * f.get_clamped(x, y, 0) + 0.587 * f.get_clamped(x, y, 1) + 0.114 * f.get_clamped(x, y, 2)
    };
    let mut acc = 0.0;
    for y in 0..f.height as isize {
        for x in 0..f.width as isize {
            let gx = (luma(x + 1, y) - luma(x - 1, y)) / 2.0;
            let gy = (luma(x, y + 1) - luma(x, y - 1)) / 2.0;
            acc += (gx * gx + gy * gy).sqrt();
        }
    }
    acc / (f.width * f.height) as f64
}

/// Copies the inclusive pixel rectangle `[x0, x1] × [y0, y1]`.
pub fn crop(img: &RgbImage, x0: u32, y0: u32, x1: u32, y1: u32) -> RgbImage {
    image::imageops::crop_imm(img, x0, y0, x1 - x0 + 1, y1 - y0 + 1).to_image()
}
