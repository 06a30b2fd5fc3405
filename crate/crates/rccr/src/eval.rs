//! Confusion-matrix accumulation, per-class IoU, and mIoU reporting,
//! including the named class-subset convention (e.g. 16-class vs 13-class
//! means on SYNTHIA-style label sets).

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::core::{LabelMap, IGNORE};
use crate::data::DatasetHandle;
use crate::models::SegModel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: prediction {0:?} vs truth {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("label {0} outside the {1}-class matrix")]
    LabelOutOfRange(u8, usize),
    #[error("class subset selects no class with a defined IoU")]
    EmptySubset,
    #[error("model failure during evaluation: {0}")]
    Model(#[from] crate::models::ModelError),
    #[error("data failure during evaluation: {0}")]
    Data(#[from] crate::data::DataError),
}

/// C x C counts with rows = ground truth, columns = prediction. IGNORE
/// truth pixels are excluded entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.dim().0
    }

    pub fn count(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[[truth, prediction]]
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Adds one image's pixels. Every non-IGNORE truth pixel increments
    /// `[truth][prediction]`.
    pub fn accumulate(&mut self, prediction: &LabelMap, truth: &LabelMap) -> Result<(), EvalError> {
        if prediction.dims() != truth.dims() {
            return Err(EvalError::ShapeMismatch(prediction.dims(), truth.dims()));
        }
        let c = self.num_classes();
        for (&p, &t) in prediction.data.iter().zip(truth.data.iter()) {
            if t == IGNORE {
                continue;
            }
            if t as usize >= c {
                return Err(EvalError::LabelOutOfRange(t, c));
            }
            if p as usize >= c {
                return Err(EvalError::LabelOutOfRange(p, c));
            }
            self.counts[[t as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Merges per-image matrices computed in parallel.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }
}

/// Per-class IoU (None where the class appears in neither truth nor
/// prediction) and the mean over defined classes, optionally restricted to a
/// subset of class ids.
pub fn miou(
    cm: &ConfusionMatrix,
    subset: Option<&[usize]>,
) -> Result<(Vec<Option<f64>>, f64), EvalError> {
    let c = cm.num_classes();
    let mut per_class: Vec<Option<f64>> = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.count(k, k);
        let fp: u64 = (0..c).filter(|&t| t != k).map(|t| cm.count(t, k)).sum();
        let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.count(k, p)).sum();
        let denom = tp + fp + fn_;
        per_class.push(if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        });
    }
    let selected: Vec<f64> = match subset {
        Some(ids) => ids
            .iter()
            .filter(|&&id| id < c)
            .filter_map(|&id| per_class[id])
            .collect(),
        None => per_class.iter().flatten().copied().collect(),
    };
    if selected.is_empty() {
        return Err(EvalError::EmptySubset);
    }
    let mean = selected.iter().sum::<f64>() / selected.len() as f64;
    Ok((per_class, mean))
}

/// Evaluation output: per-class IoU, overall mean, and any configured named
/// subset means (the 16-vs-13-class reporting style).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub subset_means: BTreeMap<String, f64>,
    pub evaluated_pixels: u64,
    pub images: usize,
}

impl EvalReport {
    /// Mean IoU in percent, the unit the tables use.
    pub fn mean_percent(&self) -> f64 {
        100.0 * self.mean_iou
    }
}

/// Runs a segmentation model over a labeled split and reports IoU. The
/// caller picks which branch to pass; the training loop always evaluates the
/// teacher, matching the inference rule.
pub fn evaluate_model(
    model: &SegModel,
    dataset: &DatasetHandle,
    num_classes: usize,
    subsets: &BTreeMap<String, Vec<usize>>,
) -> Result<EvalReport, EvalError> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for index in 0..dataset.len() {
        let sample = dataset.sample(index)?;
        let inference = model.infer(&sample.image)?;
        let prediction = inference.probs().argmax();
        cm.accumulate(&prediction, &sample.label)?;
    }
    report_from_matrix(&cm, subsets, dataset.len())
}

pub fn report_from_matrix(
    cm: &ConfusionMatrix,
    subsets: &BTreeMap<String, Vec<usize>>,
    images: usize,
) -> Result<EvalReport, EvalError> {
    let (per_class, mean_iou) = miou(cm, None)?;
    let mut subset_means = BTreeMap::new();
    for (name, ids) in subsets {
        let (_, m) = miou(cm, Some(ids))?;
        subset_means.insert(name.clone(), m);
    }
    Ok(EvalReport {
        per_class,
        mean_iou,
        subset_means,
        evaluated_pixels: cm.total(),
        images,
    })
}
