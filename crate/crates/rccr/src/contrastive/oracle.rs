//! Scalar reference implementation of the region-wise contrastive loss plus
//! finite-difference helpers.
//!
//! This module is deliberately loop-based and unoptimized: it evaluates the
//! loss exactly as written, one anchor, one positive, one negative at a time,
//! with no log-sum-exp stabilization and no shared state with the fast path
//! in the parent module. The selftest and acceptance suites check the
//! vectorized loss against it case by case.

use ndarray::Array3;

use crate::contrastive::{BankNegatives, ContrastiveBatchPlan, NegativeSource};
use crate::core::EmbeddingGrid;

fn dot(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Literal triple-loop evaluation of the contrastive loss.
pub fn rwc_loss_reference(
    plan: &ContrastiveBatchPlan,
    e_t: &EmbeddingGrid,
    e_cut: &EmbeddingGrid,
    bank: &BankNegatives,
    temperature: f64,
) -> f64 {
    let n = plan.anchors.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for anchor in &plan.anchors {
        let a = anchor.anchor;
        let anchor_emb = e_t.data.slice(ndarray::s![a.row, a.col, ..]);
        let mut inner = 0.0;
        for pos in &anchor.positives {
            let pos_emb = e_cut.data.slice(ndarray::s![pos.row, pos.col, ..]);
            let numerator = (dot(anchor_emb, pos_emb) / temperature).exp();
            let mut denominator = numerator;
            for neg in &anchor.negatives {
                let neg_emb = match neg.source {
                    NegativeSource::TeacherTarget(r) => {
                        e_t.data.slice(ndarray::s![r.row, r.col, ..])
                    }
                    NegativeSource::StudentCut(r) => {
                        e_cut.data.slice(ndarray::s![r.row, r.col, ..])
                    }
                    NegativeSource::Bank(slot) => bank.embeddings[slot].view(),
                };
                denominator += (dot(anchor_emb, neg_emb) / temperature).exp();
            }
            inner += (numerator / denominator).ln();
        }
        total += inner / anchor.positives.len() as f64;
    }
    -total / n as f64
}

/// Central finite differences of a scalar function of a grid, one entry at a
/// time: (f(x + step) - f(x - step)) / (2 step).
pub fn central_difference_grad<F>(mut f: F, x: &Array3<f64>, step: f64) -> Array3<f64>
where
    F: FnMut(&Array3<f64>) -> f64,
{
    let mut grad = Array3::zeros(x.dim());
    let mut probe = x.clone();
    let (h, w, k) = x.dim();
    for row in 0..h {
        for col in 0..w {
            for ch in 0..k {
                let original = probe[[row, col, ch]];
                probe[[row, col, ch]] = original + step;
                let plus = f(&probe);
                probe[[row, col, ch]] = original - step;
                let minus = f(&probe);
                probe[[row, col, ch]] = original;
                grad[[row, col, ch]] = (plus - minus) / (2.0 * step);
            }
        }
    }
    grad
}
