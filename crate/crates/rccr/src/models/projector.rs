//! Projection head: two consecutive 1x1 convolutions with one intermediate
//! ReLU, mapping D-channel features to K-channel embeddings (K < D), plus
//! optional per-cell L2 normalization.

use ndarray::{Array2, Array3, ArrayD};
use rand_chacha::ChaCha12Rng;

use super::conv::{Conv2d, ConvCache};
use super::ModelError;
use crate::core::{EmbeddingGrid, FeatureGrid};

/// Cells with a pre-normalization norm below this are an error: a zero
/// embedding has no direction to normalize.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Projector {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug)]
pub struct ProjectorCache {
    c1: ConvCache,
    pre_relu: Array3<f64>,
    c2: ConvCache,
    /// Per-cell norms and the normalized output, present when normalization
    /// was applied.
    norm: Option<(Array2<f64>, Array3<f64>)>,
}

/// Per-cell L2 normalization used both by the projector and by the raw
/// feature route of the contrastive loss.
pub fn normalize_cells(data: &Array3<f64>) -> Result<(Array3<f64>, Array2<f64>), ModelError> {
    let (h, w, _) = data.dim();
    let mut out = data.clone();
    let mut norms = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let norm = out
                .slice(ndarray::s![y, x, ..])
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm < NORM_EPS {
                return Err(ModelError::ZeroNorm { row: y, col: x });
            }
            norms[[y, x]] = norm;
            out.slice_mut(ndarray::s![y, x, ..]).mapv_inplace(|v| v / norm);
        }
    }
    Ok((out, norms))
}

/// Backward of per-cell normalization: for y = x / |x|,
/// dx = (g - y (y . g)) / |x|.
pub fn normalize_cells_backward(
    normalized: &Array3<f64>,
    norms: &Array2<f64>,
    d_out: &Array3<f64>,
) -> Array3<f64> {
    let (h, w, k) = normalized.dim();
    let mut d_in = Array3::zeros((h, w, k));
    for y in 0..h {
        for x in 0..w {
            let mut inner = 0.0;
            for c in 0..k {
                inner += normalized[[y, x, c]] * d_out[[y, x, c]];
            }
            let inv = 1.0 / norms[[y, x]];
            for c in 0..k {
                d_in[[y, x, c]] = (d_out[[y, x, c]] - normalized[[y, x, c]] * inner) * inv;
            }
        }
    }
    d_in
}

impl Projector {
    pub fn init(
        feature_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self, ModelError> {
        if embed_dim >= feature_dim {
            return Err(ModelError::BadConfig(format!(
                "embedding dim {embed_dim} must be smaller than feature dim {feature_dim}"
            )));
        }
        Ok(Self {
            conv1: Conv2d::init(feature_dim, hidden_dim, 1, 1, 0, rng),
            conv2: Conv2d::init(hidden_dim, embed_dim, 1, 1, 0, rng),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.conv2.out_channels()
    }

    /// Maps features to embeddings, optionally L2-normalizing each cell.
    pub fn project(
        &self,
        z: &FeatureGrid,
        normalize: bool,
    ) -> Result<(EmbeddingGrid, ProjectorCache), ModelError> {
        let (pre, c1) = self.conv1.forward(&z.data)?;
        let hidden = pre.mapv(|v| v.max(0.0));
        let (raw, c2) = self.conv2.forward(&hidden)?;
        if normalize {
            let (normalized, norms) = normalize_cells(&raw)?;
            Ok((
                EmbeddingGrid::new(normalized.clone(), true),
                ProjectorCache {
                    c1,
                    pre_relu: pre,
                    c2,
                    norm: Some((norms, normalized)),
                },
            ))
        } else {
            Ok((
                EmbeddingGrid::new(raw, false),
                ProjectorCache {
                    c1,
                    pre_relu: pre,
                    c2,
                    norm: None,
                },
            ))
        }
    }

    /// Gradient-free projection for the teacher branch.
    pub fn infer(&self, z: &FeatureGrid, normalize: bool) -> Result<EmbeddingGrid, ModelError> {
        Ok(self.project(z, normalize)?.0)
    }

    /// Backpropagates an embedding gradient to the feature grid and the
    /// projector parameters (`[conv1.w, conv1.b, conv2.w, conv2.b]`).
    pub fn backward(
        &self,
        cache: &ProjectorCache,
        d_e: &Array3<f64>,
    ) -> (Array3<f64>, Vec<ArrayD<f64>>) {
        let d_raw = match &cache.norm {
            Some((norms, normalized)) => normalize_cells_backward(normalized, norms, d_e),
            None => d_e.clone(),
        };
        let (d_hidden, g2) = self.conv2.backward(&cache.c2, &d_raw);
        let mut d_pre = d_hidden;
        d_pre.zip_mut_with(&cache.pre_relu, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let (d_z, g1) = self.conv1.backward(&cache.c1, &d_pre);
        (d_z, g1.into_iter().chain(g2).collect())
    }
}
