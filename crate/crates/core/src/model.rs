//! The trainable encoder bundle: convolutional backbone `f`, projector,
//! predictor `h`, linear instance classifier and optional domain head.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, FloatImage};
use crate::nn::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, Linear, Parameters, Tensor3};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Square input resolution.
    pub input_size: usize,
    /// Output channels of the stride-2 3×3 convolutions.
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
    pub domain_head: bool,
}

impl ArchConfig {
    pub fn desk() -> Self {
        Self {
            input_size: 32,
            channels: vec![16, 32, 64],
            feature_dim: 128,
            proj_dim: 64,
            pred_hidden: 32,
            domain_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 4 || self.channels.is_empty() {
            return Err(Error::invalid("architecture needs an input size >= 4 and at least one conv"));
        }
        if [self.feature_dim, self.proj_dim, self.pred_hidden].contains(&0) || self.channels.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

/// Per-channel normalisation applied after scaling bytes to `[0, 1]`.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Resizes an image to the encoder resolution and normalises it.
pub fn image_to_tensor(img: &RgbImage, size: usize) -> Tensor3 {
    let f = FloatImage::from_rgb(img);
    let f = if (f.width, f.height) == (size, size) { f } else { resize_bilinear(&f, size, size) };
    float_to_tensor(&f)
}

/// Interleaved `[0, 255]` buffer to a normalised CHW tensor.
pub fn float_to_tensor(f: &FloatImage) -> Tensor3 {
    let mut t = Tensor3::zeros(3, f.height, f.width);
    for y in 0..f.height {
        for x in 0..f.width {
            for c in 0..3 {
                t.data[(c * f.height + y) * f.width + x] = (f.get(x, y, c) / 255.0 - PIXEL_MEAN) / PIXEL_STD;
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBundle {
    pub arch: ArchConfig,
    /// Instance id for each classifier row.
    pub class_ids: Vec<u32>,
    pub convs: Vec<Conv2d>,
    pub embed: Linear,
    pub proj_hidden: Linear,
    pub proj_out: Linear,
    pub pred_hidden: Linear,
    pub pred_out: Linear,
    pub classifier: Linear,
    pub domain: Option<Linear>,
}

/// Outputs of one view: backbone feature `f(x)`, projection `z`,
/// prediction `p = h(z)`, class logits and optional domain logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewOutputs {
    pub feature: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub logits: Vec<f64>,
    pub domain_logits: Option<Vec<f64>>,
}

/// Activations cached by `forward_trace` for the backward pass.
#[derive(Debug, Clone)]
pub struct ViewTrace {
    input: Tensor3,
    /// Pre-activation of every conv layer.
    conv_pre: Vec<Tensor3>,
    /// Post-ReLU output of every conv layer.
    conv_post: Vec<Tensor3>,
    pooled: Vec<f64>,
    proj_pre: Vec<f64>,
    proj_act: Vec<f64>,
    pred_pre: Vec<f64>,
    pred_act: Vec<f64>,
    pub outputs: ViewOutputs,
}

/// Upstream gradients for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrad {
    pub p: Vec<f64>,
    pub logits: Vec<f64>,
    pub domain_logits: Option<Vec<f64>>,
}

impl ViewGrad {
    pub fn zeros(bundle: &EncoderBundle) -> Self {
        Self {
            p: vec![0.0; bundle.arch.proj_dim],
            logits: vec![0.0; bundle.class_ids.len()],
            domain_logits: bundle.domain.as_ref().map(|_| vec![0.0; 2]),
        }
    }
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(layer, "non-finite activation"))
    }
}

impl EncoderBundle {
    pub fn new(arch: ArchConfig, class_ids: Vec<u32>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if class_ids.is_empty() {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(arch.channels.len());
        let mut in_ch = 3;
        for &c in &arch.channels {
            convs.push(Conv2d::new(in_ch, c, 3, 2, 1, &mut rng));
            in_ch = c;
        }
        let embed = Linear::new(in_ch, arch.feature_dim, &mut rng);
        let proj_hidden = Linear::new(arch.feature_dim, arch.proj_dim, &mut rng);
        let proj_out = Linear::new(arch.proj_dim, arch.proj_dim, &mut rng);
        let pred_hidden = Linear::new(arch.proj_dim, arch.pred_hidden, &mut rng);
        let pred_out = Linear::new(arch.pred_hidden, arch.proj_dim, &mut rng);
        let classifier = Linear::new(arch.feature_dim, class_ids.len(), &mut rng);
        let domain = arch.domain_head.then(|| Linear::new(arch.feature_dim, 2, &mut rng));
        Ok(Self {
            arch,
            class_ids,
            convs,
            embed,
            proj_hidden,
            proj_out,
            pred_hidden,
            pred_out,
            classifier,
            domain,
        })
    }

    /// Same shapes, all parameters zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            class_ids: self.class_ids.clone(),
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            embed: self.embed.zeros_like(),
            proj_hidden: self.proj_hidden.zeros_like(),
            proj_out: self.proj_out.zeros_like(),
            pred_hidden: self.pred_hidden.zeros_like(),
            pred_out: self.pred_out.zeros_like(),
            classifier: self.classifier.zeros_like(),
            domain: self.domain.as_ref().map(Linear::zeros_like),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_index(&self, instance_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == instance_id)
    }

    /// Number of parameter buffers that belong to the backbone (convs and
    /// the embedding layer); they come first in `params()` order.
    pub fn backbone_buffers(&self) -> usize {
        2 * self.convs.len() + 2
    }

    /// Stable content hash of architecture, classes and parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serialises"));
        for id in &self.class_ids {
            h.update(id.to_le_bytes());
        }
        for p in self.params() {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn backbone(&self, x: &Tensor3) -> Result<Vec<f64>> {
        let mut a = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            a = conv.forward(&a);
            a.data.iter_mut().for_each(|v| *v = v.max(0.0));
            check_finite(&a.data, &format!("conv{i}"))?;
        }
        let feature = self.embed.forward(&global_avg_pool(&a));
        check_finite(&feature, "embed")?;
        Ok(feature)
    }

    pub fn forward(&self, x: &Tensor3) -> Result<ViewOutputs> {
        Ok(self.forward_trace(x)?.outputs)
    }

    pub fn forward_trace(&self, x: &Tensor3) -> Result<ViewTrace> {
        if x.c != 3 || x.h != self.arch.input_size || x.w != self.arch.input_size {
            return Err(Error::invalid(format!(
                "input is {}x{}x{}, encoder expects 3x{s}x{s}",
                x.c,
                x.h,
                x.w,
                s = self.arch.input_size
            )));
        }
        let mut conv_pre = Vec::with_capacity(self.convs.len());
        let mut conv_post = Vec::with_capacity(self.convs.len());
        let mut a = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let pre = conv.forward(&a);
            check_finite(&pre.data, &format!("conv{i}"))?;
            let post = Tensor3 {
                data: relu(&pre.data),
                ..pre.clone()
            };
            conv_pre.push(pre);
            conv_post.push(post.clone());
            a = post;
        }
        let pooled = global_avg_pool(&a);
        let feature = self.embed.forward(&pooled);
        check_finite(&feature, "embed")?;
        let proj_pre = self.proj_hidden.forward(&feature);
        let proj_act = relu(&proj_pre);
        let z = self.proj_out.forward(&proj_act);
        check_finite(&z, "projector")?;
        let pred_pre = self.pred_hidden.forward(&z);
        let pred_act = relu(&pred_pre);
        let p = self.pred_out.forward(&pred_act);
        check_finite(&p, "predictor")?;
        let logits = self.classifier.forward(&feature);
        check_finite(&logits, "classifier")?;
        let domain_logits = match &self.domain {
            Some(d) => {
                let l = d.forward(&feature);
                check_finite(&l, "domain_head")?;
                Some(l)
            }
            None => None,
        };
        Ok(ViewTrace {
            input: x.clone(),
            conv_pre,
            conv_post,
            pooled,
            proj_pre,
            proj_act,
            pred_pre,
            pred_act,
            outputs: ViewOutputs {
                feature,
                z,
                p,
                logits,
                domain_logits,
            },
        })
    }

    /// Backpropagates one view's upstream gradients into `grads`.
    ///
    /// `z` receives gradient only through the predictor path (it is never
    /// differentiated as a similarity target). The domain head's gradient
    /// into the feature is multiplied by `-reversal_lambda` before joining
    /// the backbone; the head itself is updated with the plain gradient.
    pub fn backward(&self, trace: &ViewTrace, g: &ViewGrad, reversal_lambda: f64, grads: &mut EncoderBundle) {
        let out = &trace.outputs;
        let mut g_feature = self.classifier.backward(&out.feature, &g.logits, &mut grads.classifier);

        let g_pred_act = self.pred_out.backward(&trace.pred_act, &g.p, &mut grads.pred_out);
        let g_pred_pre = relu_backward(&trace.pred_pre, &g_pred_act);
        let g_z = self.pred_hidden.backward(&out.z, &g_pred_pre, &mut grads.pred_hidden);
        let g_proj_act = self.proj_out.backward(&trace.proj_act, &g_z, &mut grads.proj_out);
        let g_proj_pre = relu_backward(&trace.proj_pre, &g_proj_act);
        let g_from_proj = self.proj_hidden.backward(&out.feature, &g_proj_pre, &mut grads.proj_hidden);
        add_into(&mut g_feature, &g_from_proj);

        if let (Some(head), Some(gd), Some(head_grad)) = (&self.domain, &g.domain_logits, grads.domain.as_mut()) {
            let g_dom = head.backward(&out.feature, gd, head_grad);
            let reversed = GradientReversal::new(reversal_lambda).backward(&g_dom);
            add_into(&mut g_feature, &reversed);
        }

        let g_pooled = self.embed.backward(&trace.pooled, &g_feature, &mut grads.embed);
        let last = trace.conv_post.last().expect("at least one conv");
        let mut g_act = global_avg_pool_backward(last.c, last.h, last.w, &g_pooled);
        for i in (0..self.convs.len()).rev() {
            let g_pre = Tensor3 {
                data: relu_backward(&trace.conv_pre[i].data, &g_act.data),
                ..g_act
            };
            let input = if i == 0 { &trace.input } else { &trace.conv_post[i - 1] };
            g_act = self.convs[i].backward(input, &g_pre, &mut grads.convs[i]);
        }
    }
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    acc.iter_mut().zip(other).for_each(|(a, b)| *a += b);
}

/// Identity on the forward pass; scales gradients by `-lambda` backwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Self {
        Self { lambda }
    }

    pub fn forward<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        x
    }

    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        g.iter().map(|v| -self.lambda * v).collect()
    }
}

impl Parameters for EncoderBundle {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.extend(c.params());
        }
        v.extend(self.embed.params());
        v.extend(self.proj_hidden.params());
        v.extend(self.proj_out.params());
        v.extend(self.pred_hidden.params());
        v.extend(self.pred_out.params());
        v.extend(self.classifier.params());
        if let Some(d) = &self.domain {
            v.extend(d.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.extend(c.params_mut());
        }
        v.extend(self.embed.params_mut());
        v.extend(self.proj_hidden.params_mut());
        v.extend(self.proj_out.params_mut());
        v.extend(self.pred_hidden.params_mut());
        v.extend(self.pred_out.params_mut());
        v.extend(self.classifier.params_mut());
        if let Some(d) = &mut self.domain {
            v.extend(d.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderBundle {
        let arch = ArchConfig {
            input_size: 8,
            channels: vec![3, 4],
            feature_dim: 6,
            proj_dim: 5,
            pred_hidden: 3,
            domain_head: true,
        };
        EncoderBundle::new(arch, vec![2, 5, 9, 11], 1).unwrap()
    }

    #[test]
    fn output_shapes() {
        let b = tiny();
        let x = image_to_tensor(&RgbImage::from_pixel(13, 7, image::Rgb([10, 200, 30])), 8);
        let out = b.forward(&x).unwrap();
        assert_eq!(out.feature.len(), 6);
        assert_eq!(out.z.len(), 5);
        assert_eq!(out.p.len(), 5);
        assert_eq!(out.logits.len(), 4);
        assert_eq!(out.domain_logits.unwrap().len(), 2);
    }

    #[test]
    fn deterministic_and_finite_on_zero_image() {
        let b = tiny();
        let x = image_to_tensor(&RgbImage::new(8, 8), 8);
        let a = b.forward(&x).unwrap();
        assert_eq!(a, b.forward(&x).unwrap());
        assert!(a.feature.iter().chain(&a.z).chain(&a.p).chain(&a.logits).all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let b = tiny();
        assert!(b.forward(&Tensor3::zeros(3, 9, 9)).is_err());
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let b = tiny();
        let mut x = Tensor3::zeros(3, 8, 8);
        x.data[5] = f64::NAN;
        match b.forward(&x) {
            Err(Error::Numeric { location, .. }) => assert_eq!(location, "conv0"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn params_layout_is_consistent() {
        let b = tiny();
        let g = b.zeros_like();
        let shapes: Vec<usize> = b.params().iter().map(|p| p.len()).collect();
        let gshapes: Vec<usize> = g.params().iter().map(|p| p.len()).collect();
        assert_eq!(shapes, gshapes);
        assert_eq!(b.backbone_buffers(), 6);
        assert_eq!(b.class_index(9), Some(2));
        assert_ne!(b.fingerprint(), EncoderBundle::new(b.arch.clone(), b.class_ids.clone(), 2).unwrap().fingerprint());
    }

    #[test]
    fn gradient_reversal_scales_by_negative_lambda() {
        let r = GradientReversal::new(0.5);
        assert_eq!(r.forward(&[1.0, 2.0]), &[1.0, 2.0]);
        assert_eq!(r.backward(&[1.0, -2.0]), vec![-0.5, 1.0]);
        assert!(GradientReversal::new(0.0).backward(&[3.0]).iter().all(|v| *v == 0.0));
    }
}
