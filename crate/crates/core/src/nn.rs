//! Minimal dense and convolutional layers with explicit backward passes.
//! Everything is `f64` so finite-difference checks stay meaningful.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Channel-major 3D activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Gives uniform access to every trainable buffer of a model, in a fixed
/// order. Gradients and optimiser state reuse the same layout.
pub trait Parameters {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero(&mut self) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

fn kaiming<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: kaiming(rng, in_dim, in_dim * out_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        gx
    }
}

impl Parameters for Linear {
    fn params(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Square-kernel 2D convolution with zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_ch × in_ch × kernel × kernel`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: kaiming(rng, fan_in, out_ch * fan_in),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..self.clone()
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
    #[inline]
    fn out_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // input index = o * stride + k - pad must lie in [0, in_len)
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(self.stride) };
        let hi_excl = if in_len + self.pad > k {
            ((in_len + self.pad - k - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.c, self.in_ch);
        let (ho, wo) = self.output_size(x.h, x.w);
        let mut out = Tensor3::zeros(self.out_ch, ho, wo);
        let k = self.kernel;
        for oc in 0..self.out_ch {
            let plane = &mut out.data[oc * ho * wo..(oc + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = self.bias[oc]);
            for ic in 0..self.in_ch {
                let src = &x.data[ic * x.h * x.w..(ic + 1) * x.h * x.w];
                for ky in 0..k {
                    let (oy0, oy1) = self.out_range(ky, x.h, ho);
                    for kx in 0..k {
                        let wv = self.weight[((oc * self.in_ch + ic) * k + ky) * k + kx];
                        let (ox0, ox1) = self.out_range(kx, x.w, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let srow = &src[iy * x.w..(iy + 1) * x.w];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * srow[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor3, gy: &Tensor3, grad: &mut Conv2d) -> Tensor3 {
        let (ho, wo) = (gy.h, gy.w);
        let k = self.kernel;
        let mut gx = Tensor3::zeros(x.c, x.h, x.w);
        for oc in 0..self.out_ch {
            let gplane = &gy.data[oc * ho * wo..(oc + 1) * ho * wo];
            grad.bias[oc] += gplane.iter().sum::<f64>();
            for ic in 0..self.in_ch {
                let src = &x.data[ic * x.h * x.w..(ic + 1) * x.h * x.w];
                let gsrc = &mut gx.data[ic * x.h * x.w..(ic + 1) * x.h * x.w];
                for ky in 0..k {
                    let (oy0, oy1) = self.out_range(ky, x.h, ho);
                    for kx in 0..k {
                        let widx = ((oc * self.in_ch + ic) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let (ox0, ox1) = self.out_range(kx, x.w, wo);
                        let mut gw = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                let ix = ox * self.stride + kx - self.pad;
                                let g = grow[ox];
                                gw += g * src[iy * x.w + ix];
                                gsrc[iy * x.w + ix] += g * wv;
                            }
                        }
                        grad.weight[widx] += gw;
                    }
                }
            }
        }
        gx
    }
}

impl Parameters for Conv2d {
    fn params(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &[f64], gy: &[f64]) -> Vec<f64> {
    pre.iter().zip(gy).map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }).collect()
}

pub fn global_avg_pool(x: &Tensor3) -> Vec<f64> {
    let n = (x.h * x.w) as f64;
    x.data.chunks_exact(x.h * x.w).map(|p| p.iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(c: usize, h: usize, w: usize, gy: &[f64]) -> Tensor3 {
    let n = (h * w) as f64;
    let mut out = Tensor3::zeros(c, h, w);
    for (plane, g) in out.data.chunks_exact_mut(h * w).zip(gy) {
        plane.iter_mut().for_each(|v| *v = g / n);
    }
    out
}
