//! Segmentation model, projection heads, EMA machinery, and the parameter
//! plumbing shared by the optimizer, the EMA update, and checkpoints.

pub mod conv;
pub mod ema;
pub mod projector;
pub mod seg;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conv::Conv2d;
pub use ema::{ema_update, EmaState};
pub use projector::{normalize_cells, normalize_cells_backward, Projector};
pub use seg::{
    cross_entropy, softmax, upsample_nearest, Classifier, Encoder, EncoderConfig, SegModel,
};

use crate::core::{FeatureGrid, ImageTensor, ProbMap, RngHandle};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("embedding cell ({row}, {col}) has norm below 1e-12; nothing to normalize")]
    ZeroNorm { row: usize, col: usize },
    #[error("bad model config: {0}")]
    BadConfig(String),
}

/// Anything exposing a flat, stably-ordered list of named parameters.
/// The optimizer, the EMA update, and checkpoints all walk this list.
pub trait Parameterized {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<ArrayViewD<'_, f64>>;
    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;
}

impl Parameterized for Conv2d {
    fn param_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }
    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        vec![self.weight.view().into_dyn(), self.bias.view().into_dyn()]
    }
    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![
            self.weight.view_mut().into_dyn(),
            self.bias.view_mut().into_dyn(),
        ]
    }
}

/// Model-shape portion of the training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// Projector hidden width (2048 at paper scale).
    pub hidden_dim: usize,
    /// Projector output width K (128 at paper scale); must stay below the
    /// encoder feature dim.
    pub embed_dim: usize,
    #[serde(default = "default_true")]
    pub normalize_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            image_h: 64,
            image_w: 64,
            encoder: EncoderConfig::default(),
            hidden_dim: 128,
            embed_dim: 32,
            normalize_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        self.encoder.total_stride()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_channels()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(ModelError::BadConfig(format!(
                "num_classes {} outside [2, 254]",
                self.num_classes
            )));
        }
        if self.embed_dim >= self.feature_dim() {
            return Err(ModelError::BadConfig(format!(
                "embed_dim {} must be smaller than the feature dim {}",
                self.embed_dim,
                self.feature_dim()
            )));
        }
        if self.image_h < self.stride() || self.image_w < self.stride() {
            return Err(ModelError::BadConfig(format!(
                "image {}x{} smaller than stride {}",
                self.image_h,
                self.image_w,
                self.stride()
            )));
        }
        Ok(())
    }
}

/// One full network: segmentation model plus projection head. The trainer
/// holds two of these, the student (optimized) and the teacher (EMA-only).
#[derive(Debug, Clone)]
pub struct Branch {
    pub seg: SegModel,
    pub proj: Projector,
}

impl Branch {
    pub fn init(cfg: &ModelConfig, rng: &RngHandle) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut r = rng.rng();
        let encoder = Encoder::init(&cfg.encoder, &mut r)?;
        let classifier = Classifier::init(cfg.feature_dim(), cfg.num_classes, cfg.stride(), &mut r);
        let proj = Projector::init(cfg.feature_dim(), cfg.hidden_dim, cfg.embed_dim, &mut r)?;
        Ok(Self {
            seg: SegModel { encoder, classifier },
            proj,
        })
    }

    /// Index of the first classifier parameter in the flat parameter list.
    pub fn classifier_offset(&self) -> usize {
        self.seg.encoder.blocks.len() * 2
    }

    /// Index of the first projector parameter in the flat parameter list.
    pub fn projector_offset(&self) -> usize {
        self.classifier_offset() + 2
    }
}

impl Parameterized for Branch {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, _) in self.seg.encoder.blocks.iter().enumerate() {
            names.push(format!("encoder.block{i}.weight"));
            names.push(format!("encoder.block{i}.bias"));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names.push("projector.conv1.weight".into());
        names.push("projector.conv1.bias".into());
        names.push("projector.conv2.weight".into());
        names.push("projector.conv2.bias".into());
        names
    }

    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::new();
        for block in &self.seg.encoder.blocks {
            out.extend(block.params());
        }
        out.extend(self.seg.classifier.conv.params());
        out.extend(self.proj.conv1.params());
        out.extend(self.proj.conv2.params());
        out
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for block in &mut self.seg.encoder.blocks {
            out.push(block.weight.view_mut().into_dyn());
            out.push(block.bias.view_mut().into_dyn());
        }
        out.push(self.seg.classifier.conv.weight.view_mut().into_dyn());
        out.push(self.seg.classifier.conv.bias.view_mut().into_dyn());
        out.push(self.proj.conv1.weight.view_mut().into_dyn());
        out.push(self.proj.conv1.bias.view_mut().into_dyn());
        out.push(self.proj.conv2.weight.view_mut().into_dyn());
        out.push(self.proj.conv2.bias.view_mut().into_dyn());
        out
    }
}

/// Flat gradient buffer aligned with a model's parameter order.
#[derive(Debug, Clone)]
pub struct GradSet(pub Vec<ArrayD<f64>>);

impl GradSet {
    pub fn zeros_like(model: &impl Parameterized) -> Self {
        Self(
            model
                .params()
                .iter()
                .map(|p| ArrayD::zeros(p.raw_dim()))
                .collect(),
        )
    }

    /// Adds `scale * pieces` starting at parameter slot `offset`. A zero
    /// scale is skipped entirely so disabled loss terms leave the buffer
    /// bit-identical.
    pub fn add_scaled_at(&mut self, offset: usize, pieces: &[ArrayD<f64>], scale: f64) {
        if scale == 0.0 {
            return;
        }
        for (i, piece) in pieces.iter().enumerate() {
            let slot = &mut self.0[offset + i];
            slot.zip_mut_with(piece, |acc, &g| *acc += scale * g);
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Teacher inference: class probabilities at image resolution plus the
/// feature grid, with no backward state recorded anywhere.
pub fn teacher_forward(
    model: &SegModel,
    image: &ImageTensor,
) -> Result<(ProbMap, FeatureGrid), ModelError> {
    let out = model.infer(image)?;
    Ok((out.probs(), out.z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn branch(seed: u64) -> Branch {
        Branch::init(&ModelConfig::default(), &RngHandle::new(seed)).unwrap()
    }

    #[test]
    fn parameter_names_align_with_views() {
        let b = branch(1);
        let names = b.param_names();
        let params = b.params();
        assert_eq!(names.len(), params.len());
        assert_eq!(names[0], "encoder.block0.weight");
        assert_eq!(names[b.classifier_offset()], "classifier.weight");
        assert_eq!(names[b.projector_offset()], "projector.conv1.weight");
        assert_eq!(names.last().unwrap(), "projector.conv2.bias");
    }

    #[test]
    fn teacher_copy_matches_student_until_ema_diverges() {
        let student = branch(2);
        let mut teacher = student.clone();
        let image = ImageTensor::zeros(64, 64);
        let (p_s, _) = teacher_forward(&student.seg, &image).unwrap();
        let (p_t, _) = teacher_forward(&teacher.seg, &image).unwrap();
        assert_eq!(p_s.data, p_t.data);

        // decay 0 snaps the teacher onto a different student immediately
        let student2 = branch(3);
        let mut state = EmaState::new(0.0).unwrap();
        ema_update(&mut state, &mut teacher, &student2).unwrap();
        let (p_t2, _) = teacher_forward(&teacher.seg, &image).unwrap();
        let (p_s2, _) = teacher_forward(&student2.seg, &image).unwrap();
        assert_eq!(p_t2.data, p_s2.data);
    }

    #[test]
    fn grad_set_skips_zero_scale() {
        let b = branch(4);
        let mut grads = GradSet::zeros_like(&b);
        let pieces: Vec<ArrayD<f64>> = b.params().iter().map(|p| ArrayD::ones(p.raw_dim())).collect();
        grads.add_scaled_at(0, &pieces, 0.0);
        assert!(grads.0.iter().all(|g| g.iter().all(|&v| v == 0.0)));
        grads.add_scaled_at(0, &pieces, 0.5);
        assert!(grads.0.iter().all(|g| g.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn model_config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.embed_dim = 64; // equals feature dim
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
