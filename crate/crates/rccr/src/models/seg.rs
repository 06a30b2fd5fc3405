//! Segmentation network: a small strided convolutional encoder followed by a
//! 1x1 classifier whose logits are upsampled back to image resolution.
//!
//! The DeepLab-style full-scale backbone is out of desk-scale scope; the
//! encoder here is a configurable stack of conv/ReLU blocks with the same
//! stride-8 feature-grid contract, so a heavier backbone can slot in behind
//! the same interfaces.

use ndarray::{Array3, ArrayD};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, ConvCache};
use super::ModelError;
use crate::core::{FeatureGrid, ImageTensor, LabelMap, ProbMap, IGNORE};

/// Encoder block widths and strides. The product of strides is the
/// feature-grid stride; the last width is the feature dimension D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 48, 64],
            strides: vec![2, 2, 2, 1],
            kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(ModelError::BadConfig(format!(
                "encoder widths ({}) and strides ({}) must be non-empty and equal-length",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::BadConfig(
                "encoder kernel must be odd so padding preserves alignment".into(),
            ));
        }
        Ok(())
    }
}

fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_backward(pre: &Array3<f64>, d_out: &Array3<f64>) -> Array3<f64> {
    let mut d = d_out.clone();
    d.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// Conv/ReLU feature extractor. Inputs are centered to [-0.5, 0.5].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<Conv2d>,
}

#[derive(Debug)]
pub struct EncoderCache {
    conv_caches: Vec<ConvCache>,
    preacts: Vec<Array3<f64>>,
}

impl Encoder {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha12Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.widths.len());
        let mut in_ch = 3;
        let pad = cfg.kernel / 2;
        for (&width, &stride) in cfg.widths.iter().zip(&cfg.strides) {
            blocks.push(Conv2d::init(in_ch, width, cfg.kernel, stride, pad, rng));
            in_ch = width;
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<(FeatureGrid, EncoderCache), ModelError> {
        let mut x = image.data.mapv(|v| v - 0.5);
        let mut conv_caches = Vec::with_capacity(self.blocks.len());
        let mut preacts = Vec::with_capacity(self.blocks.len());
        for conv in &self.blocks {
            let (pre, cache) = conv.forward(&x)?;
            x = relu(&pre);
            conv_caches.push(cache);
            preacts.push(pre);
        }
        Ok((FeatureGrid::new(x), EncoderCache { conv_caches, preacts }))
    }

    /// Parameter gradients aligned with the encoder's parameter order.
    pub fn backward(&self, cache: &EncoderCache, d_z: &Array3<f64>) -> Vec<ArrayD<f64>> {
        let mut grads_rev: Vec<Vec<ArrayD<f64>>> = Vec::with_capacity(self.blocks.len());
        let mut d = d_z.clone();
        for i in (0..self.blocks.len()).rev() {
            let d_pre = relu_backward(&cache.preacts[i], &d);
            let (d_in, conv_grads) = self.blocks[i].backward(&cache.conv_caches[i], &d_pre);
            grads_rev.push(conv_grads);
            d = d_in;
        }
        grads_rev.into_iter().rev().flatten().collect()
    }
}

/// Replicates each feature cell over its stride x stride pixel footprint.
pub fn upsample_nearest(src: &Array3<f64>, out_h: usize, out_w: usize, stride: usize) -> Array3<f64> {
    let (_, _, c) = src.dim();
    Array3::from_shape_fn((out_h, out_w, c), |(y, x, ch)| {
        src[[y / stride, x / stride, ch]]
    })
}

/// Adjoint of nearest upsampling: sums pixel gradients over each footprint.
pub fn downsample_sum(d_up: &Array3<f64>, feat_h: usize, feat_w: usize, stride: usize) -> Array3<f64> {
    let (h, w, c) = d_up.dim();
    let mut out = Array3::zeros((feat_h, feat_w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y / stride, x / stride, ch]] += d_up[[y, x, ch]];
            }
        }
    }
    out
}

/// Interpolation taps for one output axis position under half-pixel-aligned
/// bilinear scaling: two source indices and the weight of the second.
fn bilinear_taps(out_idx: usize, scale: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = (out_idx as f64 + 0.5) / scale as f64 - 0.5;
    let clamped = pos.clamp(0.0, (src_len - 1) as f64);
    let lo = clamped.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, clamped - lo as f64)
}

/// Half-pixel-aligned bilinear upsampling of a logit grid.
pub fn upsample_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize, stride: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let (y0, y1, wy) = bilinear_taps(y, stride, h);
        for x in 0..out_w {
            let (x0, x1, wx) = bilinear_taps(x, stride, w);
            for ch in 0..c {
                let top = (1.0 - wx) * src[[y0, x0, ch]] + wx * src[[y0, x1, ch]];
                let bottom = (1.0 - wx) * src[[y1, x0, ch]] + wx * src[[y1, x1, ch]];
                out[[y, x, ch]] = (1.0 - wy) * top + wy * bottom;
            }
        }
    }
    out
}

/// Adjoint of bilinear upsampling: scatters each pixel gradient onto its
/// four taps with the same weights.
pub fn downsample_bilinear_adjoint(
    d_up: &Array3<f64>,
    feat_h: usize,
    feat_w: usize,
    stride: usize,
) -> Array3<f64> {
    let (h, w, c) = d_up.dim();
    let mut out = Array3::zeros((feat_h, feat_w, c));
    for y in 0..h {
        let (y0, y1, wy) = bilinear_taps(y, stride, feat_h);
        for x in 0..w {
            let (x0, x1, wx) = bilinear_taps(x, stride, feat_w);
            for ch in 0..c {
                let g = d_up[[y, x, ch]];
                out[[y0, x0, ch]] += (1.0 - wy) * (1.0 - wx) * g;
                out[[y0, x1, ch]] += (1.0 - wy) * wx * g;
                out[[y1, x0, ch]] += wy * (1.0 - wx) * g;
                out[[y1, x1, ch]] += wy * wx * g;
            }
        }
    }
    out
}

/// 1x1 classifier over the feature grid plus nearest upsampling to the
/// image resolution.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub conv: Conv2d,
    pub stride: usize,
}

#[derive(Debug)]
pub struct ClassifierCache {
    conv: ConvCache,
    feat_hw: (usize, usize),
}

impl Classifier {
    pub fn init(feature_dim: usize, num_classes: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            conv: Conv2d::init(feature_dim, num_classes, 1, 1, 0, rng),
            stride,
        }
    }

    /// Returns feature-resolution logits and bilinearly upsampled
    /// image-resolution logits.
    pub fn forward(
        &self,
        z: &FeatureGrid,
        out_h: usize,
        out_w: usize,
    ) -> Result<(Array3<f64>, Array3<f64>, ClassifierCache), ModelError> {
        let (h, w, _) = z.dims();
        let (feat_logits, conv) = self.conv.forward(&z.data)?;
        let up_logits = upsample_bilinear(&feat_logits, out_h, out_w, self.stride);
        Ok((
            feat_logits,
            up_logits,
            ClassifierCache {
                conv,
                feat_hw: (h, w),
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ClassifierCache,
        d_up_logits: &Array3<f64>,
    ) -> (Array3<f64>, Vec<ArrayD<f64>>) {
        let (fh, fw) = cache.feat_hw;
        let d_feat = downsample_bilinear_adjoint(d_up_logits, fh, fw, self.stride);
        self.conv.backward(&cache.conv, &d_feat)
    }
}

/// Stable per-cell softmax of a logit grid.
pub fn softmax(logits: &Array3<f64>) -> ProbMap {
    let (h, w, c) = logits.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(logits[[y, x, k]]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (logits[[y, x, k]] - m).exp();
                out[[y, x, k]] = e;
                z += e;
            }
            for k in 0..c {
                out[[y, x, k]] /= z;
            }
        }
    }
    ProbMap::new(out)
}

/// Mean cross-entropy over non-IGNORE pixels with its logit gradient.
#[derive(Debug)]
pub struct CrossEntropy {
    pub value: f64,
    pub grad_logits: Array3<f64>,
    pub valid_pixels: usize,
}

pub fn cross_entropy(logits: &Array3<f64>, label: &LabelMap) -> Result<CrossEntropy, ModelError> {
    let (h, w, c) = logits.dim();
    if label.dims() != (h, w) {
        return Err(ModelError::ShapeMismatch(format!(
            "logits {h}x{w} vs label {:?}",
            label.dims()
        )));
    }
    let mut grad = Array3::zeros((h, w, c));
    let mut valid = 0usize;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let target = label.data[[y, x]];
            if target == IGNORE {
                continue;
            }
            valid += 1;
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(logits[[y, x, k]]);
            }
            let mut z = 0.0;
            for k in 0..c {
                z += (logits[[y, x, k]] - m).exp();
            }
            let log_z = z.ln() + m;
            total += log_z - logits[[y, x, target as usize]];
            for k in 0..c {
                let p = (logits[[y, x, k]] - m).exp() / z;
                grad[[y, x, k]] = p;
            }
            grad[[y, x, target as usize]] -= 1.0;
        }
    }
    if valid == 0 {
        return Ok(CrossEntropy {
            value: 0.0,
            grad_logits: grad,
            valid_pixels: 0,
        });
    }
    let scale = 1.0 / valid as f64;
    grad.mapv_inplace(|g| g * scale);
    Ok(CrossEntropy {
        value: total * scale,
        grad_logits: grad,
        valid_pixels: valid,
    })
}

/// Encoder plus classifier. Forward passes are deterministic; the teacher
/// copy is only ever driven through [`SegModel::infer`], which keeps no
/// backward state.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub encoder: Encoder,
    pub classifier: Classifier,
}

/// Gradient-free forward outputs.
#[derive(Debug)]
pub struct SegInference {
    pub z: FeatureGrid,
    pub feat_logits: Array3<f64>,
    pub up_logits: Array3<f64>,
}

impl SegInference {
    pub fn probs(&self) -> ProbMap {
        softmax(&self.up_logits)
    }

    pub fn feat_probs(&self) -> ProbMap {
        softmax(&self.feat_logits)
    }
}

/// Forward outputs plus the caches the backward pass needs.
pub struct SegForward {
    pub z: FeatureGrid,
    pub feat_logits: Array3<f64>,
    pub up_logits: Array3<f64>,
    pub enc_cache: EncoderCache,
    pub cls_cache: ClassifierCache,
}

impl SegModel {
    pub fn forward(&self, image: &ImageTensor) -> Result<SegForward, ModelError> {
        let (h, w) = image.dims();
        let (z, enc_cache) = self.encoder.forward(image)?;
        let (feat_logits, up_logits, cls_cache) = self.classifier.forward(&z, h, w)?;
        Ok(SegForward {
            z,
            feat_logits,
            up_logits,
            enc_cache,
            cls_cache,
        })
    }

    pub fn infer(&self, image: &ImageTensor) -> Result<SegInference, ModelError> {
        let fwd = self.forward(image)?;
        Ok(SegInference {
            z: fwd.z,
            feat_logits: fwd.feat_logits,
            up_logits: fwd.up_logits,
        })
    }
}
