//! Shared tensor contracts: typed grids, invariant validation, and seeded
//! RNG streams used by every other module.
//!
//! All pixel/feature data is `f64`. Label maps are `u8` with a reserved
//! [`IGNORE`] sentinel; class ids are 0-based internally (dataset adapters
//! convert at the boundary).

use ndarray::{Array2, Array3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved label value excluded from losses and evaluation.
pub const IGNORE: u8 = 255;

/// Per-pixel probability vectors must sum to one within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-5;

/// Normalized embedding cells must have unit L2 norm within this tolerance.
pub const NORM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("{name}: expected {expected}, got {got}")]
    Mismatch {
        name: &'static str,
        expected: String,
        got: String,
    },
    #[error("{0}: spatial dimensions must be >= 1")]
    EmptySpatial(&'static str),
}

/// H x W x 3 image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self, ShapeError> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(ShapeError::EmptySpatial("ImageTensor"));
        }
        if c != 3 {
            return Err(ShapeError::Mismatch {
                name: "ImageTensor",
                expected: "3 channels".into(),
                got: format!("{c} channels"),
            });
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array3::zeros((h, w, 3)),
        }
    }

    /// `(height, width)` in pixels.
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }
}

/// H x W integer label map; entries are class ids in `[0, C)` or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub data: Array2<u8>,
}

impl LabelMap {
    pub fn new(data: Array2<u8>) -> Self {
        Self { data }
    }

    pub fn filled(h: usize, w: usize, value: u8) -> Self {
        Self {
            data: Array2::from_elem((h, w), value),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Sorted distinct non-IGNORE class ids present in the map.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in self.data.iter() {
            seen[v as usize] = true;
        }
        (0..255u16)
            .filter(|&c| seen[c as usize])
            .map(|c| c as u8)
            .collect()
    }
}

/// Per-pixel class distribution, either at image or feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub data: Array3<f64>,
}

impl ProbMap {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn num_classes(&self) -> usize {
        self.data.dim().2
    }

    /// Argmax class per cell; ties break toward the lowest class id.
    pub fn argmax(&self) -> LabelMap {
        let (h, w, c) = self.data.dim();
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_p = self.data[[y, x, 0]];
                for k in 1..c {
                    let p = self.data[[y, x, k]];
                    if p > best_p {
                        best_p = p;
                        best = k;
                    }
                }
                out[[y, x]] = best as u8;
            }
        }
        LabelMap::new(out)
    }

    /// Max-class probability per cell.
    pub fn max_prob(&self) -> Array2<f64> {
        let (h, w, c) = self.data.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            (0..c)
                .map(|k| self.data[[y, x, k]])
                .fold(f64::NEG_INFINITY, f64::max)
        })
    }
}

/// h x w x D encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub data: Array3<f64>,
}

impl FeatureGrid {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// h x w x K projector output; `normalized` marks per-cell unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub data: Array3<f64>,
    pub normalized: bool,
}

impl EmbeddingGrid {
    pub fn new(data: Array3<f64>, normalized: bool) -> Self {
        Self { data, normalized }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Feature-grid resolution for an `H x W` image under an integer stride.
/// Non-divisible sizes round up.
pub fn feature_dims(image_h: usize, image_w: usize, stride: usize) -> (usize, usize) {
    (image_h.div_ceil(stride), image_w.div_ceil(stride))
}

/// Seed plus stream id addressing one deterministic ChaCha stream.
///
/// Equal `(seed, stream)` pairs reproduce identical draw sequences, so every
/// consumer derives its own stream instead of sharing a mutable generator.
/// Purpose tags live in the high bits and step/index counters in the low
/// bits; see [`streams`] for the registry of purpose tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngHandle {
    pub seed: u64,
    pub stream: u64,
}

impl RngHandle {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Stream for `purpose` (see [`streams`]) at a step or item `index`.
    /// `index` must stay below 2^48 so purpose tags cannot collide.
    pub fn substream(&self, purpose: u64, index: u64) -> Self {
        debug_assert!(index < 1 << 48);
        Self {
            seed: self.seed,
            stream: (purpose << 48) ^ index ^ self.stream,
        }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Registry of RNG purpose tags. Each consumer draws from its own stream so
/// that toggling one pipeline stage never perturbs the draws of another.
pub mod streams {
    pub const DATA_GEOMETRY: u64 = 1;
    pub const DATA_SOURCE_APPEARANCE: u64 = 2;
    pub const DATA_TARGET_APPEARANCE: u64 = 3;
    pub const PICK_SOURCE: u64 = 10;
    pub const PICK_TARGET: u64 = 11;
    pub const CUTMIX_RECT: u64 = 12;
    pub const CLASSMIX_SELECT: u64 = 13;
    pub const PHOTO_CLASSMIX: u64 = 14;
    pub const PHOTO_CUTMIX: u64 = 15;
    pub const NS_RANDOM: u64 = 16;
    pub const BANK_SUBSAMPLE: u64 = 17;
    pub const INIT_PARAMS: u64 = 20;
}

/// One violated invariant found by [`validate_shapes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub tensor: String,
    pub invariant: String,
}

/// Outcome of a validation pass. Never mutates the inspected tensors.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A typed tensor plus the context its invariants need.
pub enum TensorCheck<'a> {
    Image(&'a ImageTensor),
    Labels {
        map: &'a LabelMap,
        num_classes: usize,
    },
    Probs(&'a ProbMap),
    Features {
        grid: &'a FeatureGrid,
        /// `(image_h, image_w, stride)` when the grid should match an image.
        expect: Option<(usize, usize, usize)>,
    },
    Embeddings(&'a EmbeddingGrid),
}

/// Checks every listed tensor against its type invariants and reports all
/// violations by tensor name. Stateless and reentrant.
pub fn validate_shapes(batch: &[(&str, TensorCheck)]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut fail = |tensor: &str, invariant: String| {
        report.violations.push(Violation {
            tensor: tensor.to_string(),
            invariant,
        });
    };
    for (name, check) in batch {
        match check {
            TensorCheck::Image(img) => {
                let (h, w, _) = img.data.dim();
                if h == 0 || w == 0 {
                    fail(name, "spatial dimensions must be >= 1".into());
                }
                if let Some(v) = img.data.iter().find(|v| !v.is_finite()) {
                    fail(name, format!("non-finite entry {v}"));
                } else if img.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    fail(name, "entries must lie in [0, 1]".into());
                }
            }
            TensorCheck::Labels { map, num_classes } => {
                if *num_classes == 0 || *num_classes > IGNORE as usize {
                    fail(
                        name,
                        format!("class count {num_classes} collides with IGNORE={IGNORE}"),
                    );
                }
                if let Some(&v) = map
                    .data
                    .iter()
                    .find(|&&v| v != IGNORE && v as usize >= *num_classes)
                {
                    fail(
                        name,
                        format!("label {v} outside [0, {num_classes}) and not IGNORE"),
                    );
                }
            }
            TensorCheck::Probs(probs) => {
                if probs.data.iter().any(|v| !v.is_finite()) {
                    fail(name, "non-finite entry".into());
                } else if probs.data.iter().any(|&v| v < 0.0) {
                    fail(name, "negative probability".into());
                } else {
                    let (h, w, _) = probs.data.dim();
                    'scan: for y in 0..h {
                        for x in 0..w {
                            let s: f64 = probs.data.slice(ndarray::s![y, x, ..]).sum();
                            if (s - 1.0).abs() > PROB_SUM_TOL {
                                fail(
                                    name,
                                    format!("channel sum {s:.6} at ({y}, {x}) not within {PROB_SUM_TOL} of 1"),
                                );
                                break 'scan;
                            }
                        }
                    }
                }
            }
            TensorCheck::Features { grid, expect } => {
                if grid.data.iter().any(|v| !v.is_finite()) {
                    fail(name, "non-finite entry".into());
                }
                if let Some((ih, iw, stride)) = expect {
                    let (h, w, _) = grid.data.dim();
                    let (eh, ew) = feature_dims(*ih, *iw, *stride);
                    if (h, w) != (eh, ew) {
                        fail(
                            name,
                            format!("grid {h}x{w} does not match ceil({ih}/{stride}) x ceil({iw}/{stride})"),
                        );
                    }
                }
            }
            TensorCheck::Embeddings(emb) => {
                if emb.data.iter().any(|v| !v.is_finite()) {
                    fail(name, "non-finite entry".into());
                } else if emb.normalized {
                    let (h, w, _) = emb.data.dim();
                    'norms: for y in 0..h {
                        for x in 0..w {
                            let n: f64 = emb
                                .data
                                .slice(ndarray::s![y, x, ..])
                                .iter()
                                .map(|v| v * v)
                                .sum::<f64>()
                                .sqrt();
                            if (n - 1.0).abs() > NORM_TOL {
                                fail(
                                    name,
                                    format!("cell norm {n:.6} at ({y}, {x}) not within {NORM_TOL} of 1"),
                                );
                                break 'norms;
                            }
                        }
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::RngCore;

    #[test]
    fn well_formed_batch_passes() {
        let img = ImageTensor::new(Array3::from_elem((32, 32, 3), 0.5)).unwrap();
        let lab = LabelMap::filled(32, 32, 2);
        let report = validate_shapes(&[
            ("image", TensorCheck::Image(&img)),
            (
                "label",
                TensorCheck::Labels {
                    map: &lab,
                    num_classes: 5,
                },
            ),
        ]);
        assert!(report.passed(), "{:?}", report.violations);
    }

    #[test]
    fn label_at_class_count_is_flagged() {
        let lab = LabelMap::filled(4, 4, 5);
        let report = validate_shapes(&[(
            "label",
            TensorCheck::Labels {
                map: &lab,
                num_classes: 5,
            },
        )]);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].tensor, "label");
        assert!(report.violations[0].invariant.contains("label 5"));
    }

    #[test]
    fn ignore_label_is_allowed() {
        let lab = LabelMap::filled(4, 4, IGNORE);
        let report = validate_shapes(&[(
            "label",
            TensorCheck::Labels {
                map: &lab,
                num_classes: 5,
            },
        )]);
        assert!(report.passed());
    }

    #[test]
    fn unnormalized_probmap_is_flagged() {
        let mut data = Array3::from_elem((2, 2, 3), 0.3);
        data[[1, 1, 0]] = 0.2; // that pixel sums to 0.8
        let probs = ProbMap::new(data);
        let report = validate_shapes(&[("probs", TensorCheck::Probs(&probs))]);
        assert!(!report.passed());
        assert!(report.violations[0].invariant.contains("channel sum"));
    }

    #[test]
    fn image_out_of_range_is_flagged() {
        let mut img = ImageTensor::zeros(2, 2);
        img.data[[0, 0, 0]] = 1.5;
        let report = validate_shapes(&[("image", TensorCheck::Image(&img))]);
        assert!(!report.passed());
    }

    #[test]
    fn feature_grid_resolution_check() {
        let grid = FeatureGrid::new(Array3::zeros((8, 8, 4)));
        let ok = validate_shapes(&[(
            "z",
            TensorCheck::Features {
                grid: &grid,
                expect: Some((64, 64, 8)),
            },
        )]);
        assert!(ok.passed());
        let bad = validate_shapes(&[(
            "z",
            TensorCheck::Features {
                grid: &grid,
                expect: Some((65, 64, 8)),
            },
        )]);
        assert!(!bad.passed());
    }

    #[test]
    fn feature_dims_rounds_up() {
        assert_eq!(feature_dims(64, 64, 8), (8, 8));
        assert_eq!(feature_dims(65, 63, 8), (9, 8));
        assert_eq!(feature_dims(1, 1, 8), (1, 1));
    }

    #[test]
    fn rng_handle_reproduces_draws() {
        let a = RngHandle::with_stream(42, 7);
        let b = RngHandle::with_stream(42, 7);
        let mut ra = a.rng();
        let mut rb = b.rng();
        for _ in 0..10_000 {
            assert_eq!(ra.next_u64(), rb.next_u64());
        }
    }

    #[test]
    fn rng_streams_differ() {
        let base = RngHandle::new(42);
        let mut a = base.substream(streams::CUTMIX_RECT, 3).rng();
        let mut b = base.substream(streams::CLASSMIX_SELECT, 3).rng();
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn argmax_ties_break_low() {
        let probs = ProbMap::new(Array3::from_elem((2, 2, 4), 0.25));
        let lab = probs.argmax();
        assert!(lab.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn present_classes_sorted_and_ignores_sentinel() {
        let mut lab = LabelMap::filled(2, 3, 4);
        lab.data[[0, 0]] = 1;
        lab.data[[1, 2]] = IGNORE;
        assert_eq!(lab.present_classes(), vec![1, 4]);
    }
}
