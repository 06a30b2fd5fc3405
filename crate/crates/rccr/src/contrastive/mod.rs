//! Region-wise contrastive loss over the CutMix overlap rectangle, with the
//! positive/negative sampling strategies and memory-bank extension.
//!
//! A region is one feature-grid cell. For every anchor cell inside the
//! overlap rectangle the teacher embedding of the target image is pulled
//! toward the student embedding of the CutMix image at the same cell and
//! pushed away from embeddings at all other cells of both grids plus any
//! bank entries. Gradients flow only into the student (CutMix) embeddings;
//! the teacher grid and the bank are gradient-free by construction.

pub mod oracle;

use ndarray::{Array3, ArrayView1};
use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::core::{EmbeddingGrid, LabelMap, ProbMap, RngHandle, IGNORE};
use crate::mixing::CutMixSpec;

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("positive threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("embedding grids disagree: {0}")]
    GridMismatch(String),
    #[error("feature rectangle {0:?} empty or outside the {1}x{2} grid")]
    BadOverlap(crate::mixing::Rect, usize, usize),
    #[error("non-finite loss term at anchor {row}, {col}")]
    NonFinite { row: usize, col: usize },
}

/// Location of one region (feature-grid cell).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct RegionIndex {
    pub row: usize,
    pub col: usize,
}

/// Where a negative embedding is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NegativeSource {
    /// Teacher embedding of the target image at another cell.
    TeacherTarget(RegionIndex),
    /// Student embedding of the CutMix image at another cell.
    StudentCut(RegionIndex),
    /// Slot in the memory-bank snapshot.
    Bank(usize),
}

impl NegativeSource {
    /// Canonical sort key; the loss sums negatives in this order so that the
    /// result is bit-identical under any input permutation.
    fn sort_key(&self) -> (u8, usize, usize) {
        match *self {
            NegativeSource::TeacherTarget(r) => (0, r.row, r.col),
            NegativeSource::StudentCut(r) => (1, r.row, r.col),
            NegativeSource::Bank(slot) => (2, slot, 0),
        }
    }
}

/// One negative sample with the category id used by category-aware sampling
/// (ground-truth label where the cell is source-origin, pseudo-label where
/// target-origin, stored label for bank entries).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Negative {
    pub source: NegativeSource,
    pub category: u8,
}

/// Per-anchor positive and negative sets.
#[derive(Debug, Clone, Serialize)]
pub struct AnchorPlan {
    pub anchor: RegionIndex,
    /// Category of the anchor cell on the CutMix image (pseudo-label inside
    /// the overlap rectangle).
    pub category: u8,
    /// Locations in the student CutMix grid; one same-location entry today,
    /// kept as a list to allow multi-positive variants.
    pub positives: Vec<RegionIndex>,
    pub negatives: Vec<Negative>,
}

/// What the sampling strategies actually did while the plan was built;
/// ablation probes assert on these counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PlanConstruction {
    /// Cells inside the overlap rectangle before positive sampling.
    pub candidate_anchors: usize,
    pub ps_applied: bool,
    /// Anchors whose negative pool was halved by random sampling.
    pub ns_random_applications: usize,
    /// Anchors whose negative pool was category-filtered.
    pub ns_category_applications: usize,
    /// Anchors dropped because their category was IGNORE.
    pub ignore_dropped: usize,
}

/// The full sampling plan for one CutMix pair.
#[derive(Debug, Clone, Serialize)]
pub struct ContrastiveBatchPlan {
    pub anchors: Vec<AnchorPlan>,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Size of the bank snapshot the plan's `Bank` slots index into.
    pub bank_len: usize,
    pub construction: PlanConstruction,
}

/// Read-only snapshot of memory-bank negatives: parallel embedding and
/// category lists, oldest slab first.
#[derive(Debug, Clone, Default)]
pub struct BankNegatives {
    pub embeddings: Vec<ndarray::Array1<f64>>,
    pub categories: Vec<u8>,
}

impl BankNegatives {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Temperature, positive threshold, and the sampling-strategy switches.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub positive_threshold: f64,
    pub use_ns_random: bool,
    pub use_ns_category: bool,
    pub use_positive_sampling: bool,
    pub use_memory_bank: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            positive_threshold: 0.75,
            use_ns_random: true,
            use_ns_category: true,
            use_positive_sampling: true,
            use_memory_bank: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ContrastError> {
        if !(self.temperature > 0.0) {
            return Err(ContrastError::InvalidTemperature(self.temperature));
        }
        if !(0.0..=1.0).contains(&self.positive_threshold) {
            return Err(ContrastError::InvalidThreshold(self.positive_threshold));
        }
        Ok(())
    }
}

/// Keeps anchors whose teacher max-class probability on the target image
/// exceeds the threshold (strictly).
pub fn positive_filter(
    anchors: &[RegionIndex],
    teacher_probs_feat: &ProbMap,
    threshold: f64,
) -> Vec<RegionIndex> {
    let max_prob = teacher_probs_feat.max_prob();
    anchors
        .iter()
        .copied()
        .filter(|a| max_prob[[a.row, a.col]] > threshold)
        .collect()
}

/// Keeps floor(n/2) negatives, sampled uniformly without replacement.
/// Survivors stay in their original relative order.
pub fn ns_random(negatives: &[Negative], rng: &RngHandle) -> Vec<Negative> {
    let keep = negatives.len() / 2;
    let mut r = rng.rng();
    let mut picked: Vec<usize> = (0..negatives.len())
        .collect::<Vec<_>>()
        .choose_multiple(&mut r, keep)
        .copied()
        .collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| negatives[i]).collect()
}

/// Removes every negative sharing the anchor's category, preserving order.
/// Returns `None` when the anchor category is IGNORE, which signals that the
/// anchor must be dropped from the plan.
pub fn ns_category(negatives: &[Negative], anchor_category: u8) -> Option<Vec<Negative>> {
    if anchor_category == IGNORE {
        return None;
    }
    Some(
        negatives
            .iter()
            .copied()
            .filter(|n| n.category != anchor_category)
            .collect(),
    )
}

/// Builds the anchor/positive/negative plan for one CutMix pair.
///
/// Anchors are the feature cells inside the overlap rectangle, optionally
/// filtered by positive sampling. Each anchor's positive is the student
/// CutMix embedding at the same cell; the base negative pool is every other
/// cell of both grids, transformed by the enabled sampling strategies and
/// extended with bank entries. An empty result (all anchors filtered) is a
/// valid plan, not an error.
#[allow(clippy::too_many_arguments)]
pub fn build_plan(
    spec: &CutMixSpec,
    e_t: &EmbeddingGrid,
    e_cut: &EmbeddingGrid,
    teacher_probs_feat: &ProbMap,
    mixed_label_feat: &LabelMap,
    bank: &BankNegatives,
    cfg: &ContrastiveConfig,
    rng: &RngHandle,
) -> Result<ContrastiveBatchPlan, ContrastError> {
    cfg.validate()?;
    let (h, w, k) = e_t.dims();
    if e_cut.dims() != (h, w, k) {
        return Err(ContrastError::GridMismatch(format!(
            "e_t {:?} vs e_cut {:?}",
            e_t.dims(),
            e_cut.dims()
        )));
    }
    let rect = spec.feat_rect;
    if rect.area() == 0 || rect.bottom() > h || rect.right() > w {
        return Err(ContrastError::BadOverlap(rect, h, w));
    }
    let teacher_labels = teacher_probs_feat.argmax();

    let mut anchors: Vec<RegionIndex> = Vec::with_capacity(rect.area());
    for row in rect.top..rect.bottom() {
        for col in rect.left..rect.right() {
            anchors.push(RegionIndex { row, col });
        }
    }
    let mut construction = PlanConstruction {
        candidate_anchors: anchors.len(),
        ps_applied: cfg.use_positive_sampling,
        ..PlanConstruction::default()
    };
    if cfg.use_positive_sampling {
        anchors = positive_filter(&anchors, teacher_probs_feat, cfg.positive_threshold);
    }

    let bank_len = if cfg.use_memory_bank { bank.len() } else { 0 };
    let mut plans = Vec::with_capacity(anchors.len());
    for (idx, anchor) in anchors.iter().enumerate() {
        let anchor_category = mixed_label_feat.data[[anchor.row, anchor.col]];
        let mut negatives: Vec<Negative> = Vec::with_capacity(2 * h * w - 2);
        for row in 0..h {
            for col in 0..w {
                if row == anchor.row && col == anchor.col {
                    continue;
                }
                negatives.push(Negative {
                    source: NegativeSource::TeacherTarget(RegionIndex { row, col }),
                    category: teacher_labels.data[[row, col]],
                });
            }
        }
        for row in 0..h {
            for col in 0..w {
                if row == anchor.row && col == anchor.col {
                    continue;
                }
                negatives.push(Negative {
                    source: NegativeSource::StudentCut(RegionIndex { row, col }),
                    category: mixed_label_feat.data[[row, col]],
                });
            }
        }
        if cfg.use_ns_random {
            negatives = ns_random(&negatives, &rng.substream(0, idx as u64));
            construction.ns_random_applications += 1;
        }
        if cfg.use_ns_category {
            match ns_category(&negatives, anchor_category) {
                Some(filtered) => {
                    negatives = filtered;
                    construction.ns_category_applications += 1;
                }
                None => {
                    // IGNORE anchor: drop it from the plan
                    construction.ignore_dropped += 1;
                    continue;
                }
            }
        }
        if cfg.use_memory_bank {
            for slot in 0..bank_len {
                if cfg.use_ns_category && bank.categories[slot] == anchor_category {
                    continue;
                }
                negatives.push(Negative {
                    source: NegativeSource::Bank(slot),
                    category: bank.categories[slot],
                });
            }
        }
        plans.push(AnchorPlan {
            anchor: *anchor,
            category: anchor_category,
            positives: vec![*anchor],
            negatives,
        });
    }
    Ok(ContrastiveBatchPlan {
        anchors: plans,
        grid_h: h,
        grid_w: w,
        bank_len,
        construction,
    })
}

/// Loss value plus the analytic gradient with respect to the student CutMix
/// embeddings. No gradient exists for the teacher grid or bank entries.
#[derive(Debug, Clone)]
pub struct RwcLoss {
    pub value: f64,
    pub grad_e_cut: Array3<f64>,
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Similarity clamped to [-1, 1]; the boolean gates gradient flow (zero
/// derivative outside the clamp range).
fn clamped_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, bool) {
    let raw = dot(a, b);
    if raw > 1.0 {
        (1.0, false)
    } else if raw < -1.0 {
        (-1.0, false)
    } else {
        (raw, true)
    }
}

/// Vectorized evaluation of the region-wise contrastive loss with log-sum-exp
/// stabilization and its gradient into the student embeddings.
///
/// Negatives are summed in a canonical source/location order, so the value is
/// bit-identical under any permutation of each anchor's negative list.
pub fn rwc_loss(
    plan: &ContrastiveBatchPlan,
    e_t: &EmbeddingGrid,
    e_cut: &EmbeddingGrid,
    bank: &BankNegatives,
    temperature: f64,
) -> Result<RwcLoss, ContrastError> {
    if !(temperature > 0.0) {
        return Err(ContrastError::InvalidTemperature(temperature));
    }
    let dims = e_cut.data.dim();
    let mut grad = Array3::<f64>::zeros(dims);
    let n = plan.anchors.len();
    if n == 0 {
        return Ok(RwcLoss {
            value: 0.0,
            grad_e_cut: grad,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for anchor in &plan.anchors {
        let a = anchor.anchor;
        let anchor_emb = e_t.data.slice(ndarray::s![a.row, a.col, ..]);

        let mut ordered: Vec<&Negative> = anchor.negatives.iter().collect();
        ordered.sort_unstable_by_key(|neg| neg.source.sort_key());
        let neg_sims: Vec<(f64, bool)> = ordered
            .iter()
            .map(|neg| match neg.source {
                NegativeSource::TeacherTarget(r) => {
                    (clamped_sim(anchor_emb, e_t.data.slice(ndarray::s![r.row, r.col, ..])).0, false)
                }
                NegativeSource::StudentCut(r) => {
                    clamped_sim(anchor_emb, e_cut.data.slice(ndarray::s![r.row, r.col, ..]))
                }
                NegativeSource::Bank(slot) => {
                    (clamped_sim(anchor_emb, bank.embeddings[slot].view()).0, false)
                }
            })
            .collect();
        let max_neg = neg_sims
            .iter()
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);

        let inv_p = 1.0 / anchor.positives.len() as f64;
        let scale = inv_n * inv_p / temperature;
        for pos in &anchor.positives {
            let pos_view = e_cut.data.slice(ndarray::s![pos.row, pos.col, ..]);
            let (sim_pos, pos_grad_open) = clamped_sim(anchor_emb, pos_view);
            let m = (sim_pos.max(max_neg)) / temperature;
            let exp_pos = (sim_pos / temperature - m).exp();
            let mut z = exp_pos;
            for (s, _) in &neg_sims {
                z += (s / temperature - m).exp();
            }
            let term = m + z.ln() - sim_pos / temperature;
            if !term.is_finite() {
                return Err(ContrastError::NonFinite {
                    row: a.row,
                    col: a.col,
                });
            }
            total += inv_p * term;

            // d term / d sim_pos = (exp_pos / z - 1) / temperature
            if pos_grad_open {
                let coeff = scale * (exp_pos / z - 1.0);
                let mut g = grad.slice_mut(ndarray::s![pos.row, pos.col, ..]);
                g.iter_mut()
                    .zip(anchor_emb.iter())
                    .for_each(|(gv, &av)| *gv += coeff * av);
            }
            // d term / d sim_neg_k = softmax_k / temperature, student side only
            for (neg, (s, grad_open)) in ordered.iter().zip(neg_sims.iter()) {
                if !grad_open {
                    continue;
                }
                if let NegativeSource::StudentCut(r) = neg.source {
                    let coeff = scale * ((s / temperature - m).exp() / z);
                    let mut g = grad.slice_mut(ndarray::s![r.row, r.col, ..]);
                    g.iter_mut()
                        .zip(anchor_emb.iter())
                        .for_each(|(gv, &av)| *gv += coeff * av);
                }
            }
        }
    }
    let value = total * inv_n;
    if !value.is_finite() {
        let a = plan.anchors[0].anchor;
        return Err(ContrastError::NonFinite {
            row: a.row,
            col: a.col,
        });
    }
    Ok(RwcLoss {
        value,
        grad_e_cut: grad,
    })
}

/// Human-readable record of a plan for inspection and debug dumps.
#[derive(Debug, Clone, Serialize)]
pub struct PlanSummary {
    pub anchor_count: usize,
    pub bank_len: usize,
    pub min_negatives: usize,
    pub max_negatives: usize,
    pub mean_negatives: f64,
    pub anchors: Vec<(usize, usize)>,
}

impl ContrastiveBatchPlan {
    pub fn summary(&self) -> PlanSummary {
        let sizes: Vec<usize> = self.anchors.iter().map(|a| a.negatives.len()).collect();
        let total: usize = sizes.iter().sum();
        PlanSummary {
            anchor_count: self.anchors.len(),
            bank_len: self.bank_len,
            min_negatives: sizes.iter().copied().min().unwrap_or(0),
            max_negatives: sizes.iter().copied().max().unwrap_or(0),
            mean_negatives: if sizes.is_empty() {
                0.0
            } else {
                total as f64 / sizes.len() as f64
            },
            anchors: self.anchors.iter().map(|a| (a.anchor.row, a.anchor.col)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::streams;
    use crate::mixing::Rect;
    use approx::assert_relative_eq;
    use ndarray::{Array1, Array3};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn normalized_grid(h: usize, w: usize, k: usize, seed: u64) -> EmbeddingGrid {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut data = Array3::from_shape_fn((h, w, k), |_| rng.gen_range(-1.0..1.0));
        for y in 0..h {
            for x in 0..w {
                let norm = data
                    .slice(ndarray::s![y, x, ..])
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                data.slice_mut(ndarray::s![y, x, ..]).mapv_inplace(|v| v / norm);
            }
        }
        EmbeddingGrid::new(data, true)
    }

    fn full_spec(h: usize, w: usize, stride: usize) -> CutMixSpec {
        CutMixSpec::from_pixel_rect(
            Rect {
                top: 0,
                left: 0,
                height: h * stride,
                width: w * stride,
            },
            stride,
        )
        .unwrap()
    }

    fn uniform_probs(h: usize, w: usize, c: usize) -> ProbMap {
        ProbMap::new(Array3::from_elem((h, w, c), 1.0 / c as f64))
    }

    fn plain_cfg() -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: 0.1,
            positive_threshold: 0.75,
            use_ns_random: false,
            use_ns_category: false,
            use_positive_sampling: false,
            use_memory_bank: false,
        }
    }

    #[test]
    fn full_overlap_plan_counts() {
        let e_t = normalized_grid(4, 4, 8, 1);
        let e_cut = normalized_grid(4, 4, 8, 2);
        let plan = build_plan(
            &full_spec(4, 4, 8),
            &e_t,
            &e_cut,
            &uniform_probs(4, 4, 5),
            &LabelMap::filled(4, 4, 1),
            &BankNegatives::default(),
            &plain_cfg(),
            &RngHandle::new(0),
        )
        .unwrap();
        assert_eq!(plan.anchors.len(), 16);
        for anchor in &plan.anchors {
            assert_eq!(anchor.positives.len(), 1);
            assert_eq!(anchor.negatives.len(), 30);
            for neg in &anchor.negatives {
                match neg.source {
                    NegativeSource::TeacherTarget(r) | NegativeSource::StudentCut(r) => {
                        assert_ne!((r.row, r.col), (anchor.anchor.row, anchor.anchor.col));
                    }
                    NegativeSource::Bank(_) => panic!("no bank configured"),
                }
            }
        }
    }

    #[test]
    fn single_cell_overlap() {
        let e_t = normalized_grid(4, 4, 8, 3);
        let e_cut = normalized_grid(4, 4, 8, 4);
        let spec = CutMixSpec::from_pixel_rect(
            Rect {
                top: 8,
                left: 8,
                height: 8,
                width: 8,
            },
            8,
        )
        .unwrap();
        let plan = build_plan(
            &spec,
            &e_t,
            &e_cut,
            &uniform_probs(4, 4, 5),
            &LabelMap::filled(4, 4, 1),
            &BankNegatives::default(),
            &plain_cfg(),
            &RngHandle::new(0),
        )
        .unwrap();
        assert_eq!(plan.anchors.len(), 1);
        assert_eq!(plan.anchors[0].positives.len(), 1);
    }

    #[test]
    fn threshold_one_empties_plan() {
        let e_t = normalized_grid(4, 4, 8, 5);
        let e_cut = normalized_grid(4, 4, 8, 6);
        let mut cfg = plain_cfg();
        cfg.use_positive_sampling = true;
        cfg.positive_threshold = 1.0;
        let plan = build_plan(
            &full_spec(4, 4, 8),
            &e_t,
            &e_cut,
            &uniform_probs(4, 4, 5),
            &LabelMap::filled(4, 4, 1),
            &BankNegatives::default(),
            &cfg,
            &RngHandle::new(0),
        )
        .unwrap();
        assert!(plan.anchors.is_empty());
        let loss = rwc_loss(&plan, &e_t, &e_cut, &BankNegatives::default(), 0.1).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn ns_random_cardinality() {
        let negatives: Vec<Negative> = (0..30)
            .map(|i| Negative {
                source: NegativeSource::Bank(i),
                category: 0,
            })
            .collect();
        let kept = ns_random(&negatives, &RngHandle::new(1));
        assert_eq!(kept.len(), 15);
        let one = ns_random(&negatives[..1], &RngHandle::new(1));
        assert!(one.is_empty());
    }

    #[test]
    fn ns_random_frequency() {
        let negatives: Vec<Negative> = (0..4)
            .map(|i| Negative {
                source: NegativeSource::Bank(i),
                category: 0,
            })
            .collect();
        let trials = 10_000;
        let mut hits = [0usize; 4];
        for t in 0..trials {
            let kept = ns_random(&negatives, &RngHandle::new(7).substream(streams::NS_RANDOM, t));
            for n in kept {
                if let NegativeSource::Bank(slot) = n.source {
                    hits[slot] += 1;
                }
            }
        }
        for (slot, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            assert!(
                (freq - 0.5).abs() <= 0.02,
                "slot {slot} retained with frequency {freq}"
            );
        }
    }

    #[test]
    fn ns_category_filters_same_category() {
        let negatives: Vec<Negative> = [3u8, 1, 3, 2]
            .iter()
            .enumerate()
            .map(|(i, &category)| Negative {
                source: NegativeSource::Bank(i),
                category,
            })
            .collect();
        let kept = ns_category(&negatives, 3).unwrap();
        let cats: Vec<u8> = kept.iter().map(|n| n.category).collect();
        assert_eq!(cats, vec![1, 2]);

        let all_other = ns_category(&negatives, 9).unwrap();
        assert_eq!(all_other.len(), 4);

        assert!(ns_category(&negatives, IGNORE).is_none());
    }

    #[test]
    fn positive_filter_thresholds() {
        let anchors: Vec<RegionIndex> = (0..2)
            .flat_map(|row| (0..2).map(move |col| RegionIndex { row, col }))
            .collect();
        let uniform = uniform_probs(2, 2, 4);
        assert_eq!(positive_filter(&anchors, &uniform, 0.0).len(), 4);
        assert!(positive_filter(&anchors, &uniform, 0.75).is_empty());

        // hand-built maxima 0.9, 0.7, 0.8, 0.5 -> two survive at 0.75
        let mut data = Array3::from_elem((2, 2, 4), 0.0);
        for (i, &m) in [0.9, 0.7, 0.8, 0.5].iter().enumerate() {
            let (row, col) = (i / 2, i % 2);
            data[[row, col, 0]] = m;
            for ch in 1..4 {
                data[[row, col, ch]] = (1.0 - m) / 3.0;
            }
        }
        let probs = ProbMap::new(data);
        let kept = positive_filter(&anchors, &probs, 0.75);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0], RegionIndex { row: 0, col: 0 });
        assert_eq!(kept[1], RegionIndex { row: 1, col: 0 });
    }

    #[test]
    fn loss_without_negatives_is_zero() {
        let e_t = normalized_grid(1, 1, 4, 8);
        let e_cut = normalized_grid(1, 1, 4, 9);
        let plan = ContrastiveBatchPlan {
            anchors: vec![AnchorPlan {
                anchor: RegionIndex { row: 0, col: 0 },
                category: 0,
                positives: vec![RegionIndex { row: 0, col: 0 }],
                negatives: vec![],
            }],
            grid_h: 1,
            grid_w: 1,
            bank_len: 0,
            construction: PlanConstruction::default(),
        };
        let out = rwc_loss(&plan, &e_t, &e_cut, &BankNegatives::default(), 0.1).unwrap();
        assert_eq!(out.value, 0.0);
        let reference =
            oracle::rwc_loss_reference(&plan, &e_t, &e_cut, &BankNegatives::default(), 0.1);
        assert_eq!(reference, 0.0);
    }

    #[test]
    fn two_term_closed_form() {
        // sp = 1 (identical unit vectors), one orthogonal negative: the loss
        // is log(1 + exp((sn - sp) / tau)) = log(1 + e^{-10}) at tau = 0.1.
        let mut e_t = EmbeddingGrid::new(Array3::zeros((1, 2, 2)), true);
        e_t.data[[0, 0, 0]] = 1.0;
        e_t.data[[0, 1, 1]] = 1.0;
        let mut e_cut = EmbeddingGrid::new(Array3::zeros((1, 2, 2)), true);
        e_cut.data[[0, 0, 0]] = 1.0;
        e_cut.data[[0, 1, 1]] = 1.0;
        let plan = ContrastiveBatchPlan {
            anchors: vec![AnchorPlan {
                anchor: RegionIndex { row: 0, col: 0 },
                category: 0,
                positives: vec![RegionIndex { row: 0, col: 0 }],
                negatives: vec![Negative {
                    source: NegativeSource::TeacherTarget(RegionIndex { row: 0, col: 1 }),
                    category: 1,
                }],
            }],
            grid_h: 1,
            grid_w: 2,
            bank_len: 0,
            construction: PlanConstruction::default(),
        };
        let expected = (1.0 + (-10.0f64).exp()).ln();
        let fast = rwc_loss(&plan, &e_t, &e_cut, &BankNegatives::default(), 0.1).unwrap();
        assert_relative_eq!(fast.value, expected, max_relative = 1e-9);
        let reference =
            oracle::rwc_loss_reference(&plan, &e_t, &e_cut, &BankNegatives::default(), 0.1);
        assert_relative_eq!(reference, expected, max_relative = 1e-12);
    }

    fn random_plan_and_bank(
        h: usize,
        w: usize,
        seed: u64,
        with_bank: bool,
        k: usize,
    ) -> (ContrastiveBatchPlan, BankNegatives) {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let bank_len = if with_bank { rng.gen_range(1..12) } else { 0 };
        let mut bank = BankNegatives::default();
        for _ in 0..bank_len {
            let mut v = Array1::from_shape_fn(k, |_| rng.gen_range(-1.0..1.0));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.mapv_inplace(|x| x / norm);
            bank.embeddings.push(v);
            bank.categories.push(rng.gen_range(0..5));
        }
        let mut anchors = Vec::new();
        for row in 0..h {
            for col in 0..w {
                if rng.gen_bool(0.5) {
                    continue;
                }
                let mut negatives = Vec::new();
                for r in 0..h {
                    for c in 0..w {
                        if (r, c) == (row, col) {
                            continue;
                        }
                        if rng.gen_bool(0.6) {
                            negatives.push(Negative {
                                source: NegativeSource::TeacherTarget(RegionIndex {
                                    row: r,
                                    col: c,
                                }),
                                category: rng.gen_range(0..5),
                            });
                        }
                        if rng.gen_bool(0.6) {
                            negatives.push(Negative {
                                source: NegativeSource::StudentCut(RegionIndex { row: r, col: c }),
                                category: rng.gen_range(0..5),
                            });
                        }
                    }
                }
                for slot in 0..bank_len {
                    if rng.gen_bool(0.7) {
                        negatives.push(Negative {
                            source: NegativeSource::Bank(slot),
                            category: 0,
                        });
                    }
                }
                anchors.push(AnchorPlan {
                    anchor: RegionIndex { row, col },
                    category: rng.gen_range(0..5),
                    positives: vec![RegionIndex { row, col }],
                    negatives,
                });
            }
        }
        (
            ContrastiveBatchPlan {
                anchors,
                grid_h: h,
                grid_w: w,
                bank_len,
                construction: PlanConstruction::default(),
            },
            bank,
        )
    }

    #[test]
    fn matches_scalar_oracle_on_random_grids() {
        for case in 0..40 {
            let h = 2 + (case as usize % 7);
            let w = 2 + ((case as usize / 2) % 7);
            let k = 4 + (case as usize % 13);
            let e_t = normalized_grid(h, w, k, 100 + case);
            let e_cut = normalized_grid(h, w, k, 200 + case);
            let (plan, bank) = random_plan_and_bank(h, w, 300 + case, case % 2 == 0, k);
            let fast = rwc_loss(&plan, &e_t, &e_cut, &bank, 0.1).unwrap();
            let reference = oracle::rwc_loss_reference(&plan, &e_t, &e_cut, &bank, 0.1);
            assert_relative_eq!(fast.value, reference, max_relative = 1e-6);
        }
    }

    #[test]
    fn permutation_of_negatives_is_bit_exact() {
        let e_t = normalized_grid(3, 3, 6, 11);
        let e_cut = normalized_grid(3, 3, 6, 12);
        let (mut plan, bank) = random_plan_and_bank(3, 3, 13, true, 6);
        let base = rwc_loss(&plan, &e_t, &e_cut, &bank, 0.1).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for anchor in &mut plan.anchors {
            anchor.negatives.shuffle(&mut rng);
        }
        let shuffled = rwc_loss(&plan, &e_t, &e_cut, &bank, 0.1).unwrap();
        assert_eq!(base.value.to_bits(), shuffled.value.to_bits());
        assert_eq!(base.grad_e_cut, shuffled.grad_e_cut);
    }

    #[test]
    fn monotonic_in_similarities() {
        // raising the positive similarity lowers the loss; raising a negative
        // similarity raises it.
        let k = 4;
        let mut e_t = EmbeddingGrid::new(Array3::zeros((1, 3, k)), true);
        e_t.data[[0, 0, 0]] = 1.0;
        e_t.data[[0, 1, 1]] = 1.0;
        e_t.data[[0, 2, 2]] = 1.0;
        let plan = ContrastiveBatchPlan {
            anchors: vec![AnchorPlan {
                anchor: RegionIndex { row: 0, col: 0 },
                category: 0,
                positives: vec![RegionIndex { row: 0, col: 0 }],
                negatives: vec![Negative {
                    source: NegativeSource::StudentCut(RegionIndex { row: 0, col: 1 }),
                    category: 1,
                }],
            }],
            grid_h: 1,
            grid_w: 3,
            bank_len: 0,
            construction: PlanConstruction::default(),
        };
        let build_cut = |sp: f64, sn: f64| {
            let mut e = EmbeddingGrid::new(Array3::zeros((1, 3, k)), true);
            e.data[[0, 0, 0]] = sp;
            e.data[[0, 0, 3]] = (1.0 - sp * sp).sqrt();
            e.data[[0, 1, 0]] = sn;
            e.data[[0, 1, 3]] = (1.0 - sn * sn).sqrt();
            e.data[[0, 2, 2]] = 1.0;
            e
        };
        let loss = |sp: f64, sn: f64| {
            rwc_loss(
                &plan,
                &e_t,
                &build_cut(sp, sn),
                &BankNegatives::default(),
                0.1,
            )
            .unwrap()
            .value
        };
        assert!(loss(0.9, 0.2) < loss(0.7, 0.2));
        assert!(loss(0.7, 0.5) > loss(0.7, 0.2));
    }

    #[test]
    fn rescaling_before_normalization_is_invariant() {
        let h = 3;
        let raw = Array3::from_shape_fn((h, h, 5), |(y, x, c)| {
            ((y * 19 + x * 7 + c * 3) as f64).sin()
        });
        let normalize = |data: &Array3<f64>| {
            let mut out = data.clone();
            for y in 0..h {
                for x in 0..h {
                    let norm = out
                        .slice(ndarray::s![y, x, ..])
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    out.slice_mut(ndarray::s![y, x, ..]).mapv_inplace(|v| v / norm);
                }
            }
            EmbeddingGrid::new(out, true)
        };
        let e_t = normalize(&raw);
        let e_cut = normalize(&raw.mapv(|v| v + 0.3));
        let e_cut_scaled = normalize(&raw.mapv(|v| (v + 0.3) * 37.5));
        let (plan, bank) = random_plan_and_bank(h, h, 21, false, 5);
        let a = rwc_loss(&plan, &e_t, &e_cut, &bank, 0.1).unwrap();
        let b = rwc_loss(&plan, &e_t, &e_cut_scaled, &bank, 0.1).unwrap();
        assert_relative_eq!(a.value, b.value, max_relative = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let e_t = normalized_grid(3, 3, 4, 31);
        let e_cut = normalized_grid(3, 3, 4, 32);
        let (plan, bank) = random_plan_and_bank(3, 3, 33, true, 4);
        let analytic = rwc_loss(&plan, &e_t, &e_cut, &bank, 0.1).unwrap();
        let numeric = oracle::central_difference_grad(
            |probe| {
                let grid = EmbeddingGrid::new(probe.clone(), true);
                rwc_loss(&plan, &e_t, &grid, &bank, 0.1).unwrap().value
            },
            &e_cut.data,
            1e-4,
        );
        for (a, n) in analytic.grad_e_cut.iter().zip(numeric.iter()) {
            // absolute floor sits at the finite-difference noise level
            assert!(
                (a - n).abs() <= 1e-7 + 1e-4 * n.abs().max(a.abs()),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn no_gradient_path_into_teacher_embeddings() {
        let e_t = normalized_grid(3, 3, 4, 41);
        let e_cut = normalized_grid(3, 3, 4, 42);
        let (plan, bank) = random_plan_and_bank(3, 3, 43, false, 4);
        let base = rwc_loss(&plan, &e_t, &e_cut, &bank, 0.1).unwrap();
        let mut perturbed = e_t.clone();
        perturbed.data[[0, 0, 0]] += 1e-3;
        let moved = rwc_loss(&plan, &perturbed, &e_cut, &bank, 0.1).unwrap();
        // the loss depends on e_t ...
        assert_ne!(base.value, moved.value);
        // ... but the only gradient the implementation exposes is d/d e_cut.
        assert_eq!(base.grad_e_cut.dim(), e_cut.data.dim());
    }

    #[test]
    fn temperature_guard() {
        let e_t = normalized_grid(2, 2, 4, 51);
        let e_cut = normalized_grid(2, 2, 4, 52);
        let (plan, bank) = random_plan_and_bank(2, 2, 53, false, 4);
        assert!(matches!(
            rwc_loss(&plan, &e_t, &e_cut, &bank, 0.0),
            Err(ContrastError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn all_same_category_negatives_degenerate_to_zero() {
        let e_t = normalized_grid(2, 2, 4, 61);
        let e_cut = normalized_grid(2, 2, 4, 62);
        let negatives: Vec<Negative> = (0..3)
            .map(|i| Negative {
                source: NegativeSource::Bank(i),
                category: 2,
            })
            .collect();
        let filtered = ns_category(&negatives, 2).unwrap();
        assert!(filtered.is_empty());
        let plan = ContrastiveBatchPlan {
            anchors: vec![AnchorPlan {
                anchor: RegionIndex { row: 0, col: 0 },
                category: 2,
                positives: vec![RegionIndex { row: 0, col: 0 }],
                negatives: filtered,
            }],
            grid_h: 2,
            grid_w: 2,
            bank_len: 0,
            construction: PlanConstruction::default(),
        };
        let reference =
            oracle::rwc_loss_reference(&plan, &e_t, &e_cut, &BankNegatives::default(), 0.1);
        let fast = rwc_loss(&plan, &e_t, &e_cut, &BankNegatives::default(), 0.1).unwrap();
        assert_eq!(reference, 0.0);
        assert_eq!(fast.value, 0.0);
    }
}
