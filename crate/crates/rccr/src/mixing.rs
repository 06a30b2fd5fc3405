//! CutMix and ClassMix composites, mixed labels, the region bookkeeping the
//! contrastive loss needs, and photometric augmentation of mixed images.
//!
//! CutMix rectangles are sampled on stride-aligned boundaries so that every
//! feature cell inside the derived feature rectangle is fully target-origin;
//! cells of mixed provenance would otherwise poison the positive pairs.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::core::{ImageTensor, LabelMap, RngHandle, IGNORE};

#[derive(Debug, Error)]
pub enum MixError {
    #[error("shape mismatch: {context} ({a}x{b} vs {c}x{d})")]
    ShapeMismatch {
        context: &'static str,
        a: usize,
        b: usize,
        c: usize,
        d: usize,
    },
    #[error("area range ({0}, {1}) admits no valid stride-aligned rectangle")]
    NoValidRectangle(f64, f64),
    #[error("invalid sampler range: {0}")]
    InvalidRange(String),
    #[error("source label contains no non-IGNORE class")]
    AllIgnore,
}

/// Image + label pair flowing through the source, target, and mixed branches.
/// For target samples the label is a teacher pseudo-label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(image: ImageTensor, label: LabelMap) -> Result<Self, MixError> {
        let (h, w) = image.dims();
        let (lh, lw) = label.dims();
        if (h, w) != (lh, lw) {
            return Err(MixError::ShapeMismatch {
                context: "sample image vs label",
                a: h,
                b: w,
                c: lh,
                d: lw,
            });
        }
        Ok(Self { image, label })
    }
}

/// Axis-aligned rectangle in (top, left, height, width) form. Used both in
/// pixel coordinates and, divided by the stride, in feature-grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom() && col >= self.left && col < self.right()
    }
}

/// A sampled CutMix rectangle in pixel coordinates together with its
/// footprint on the feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutMixSpec {
    pub rect: Rect,
    pub feat_rect: Rect,
    pub stride: usize,
}

impl CutMixSpec {
    /// Derives the feature rectangle by rounding the pixel rectangle inward
    /// (ceil on top/left, floor on bottom/right), so cells inside it are
    /// fully covered by the pixel rectangle.
    pub fn from_pixel_rect(rect: Rect, stride: usize) -> Result<Self, MixError> {
        let ft = rect.top.div_ceil(stride);
        let fl = rect.left.div_ceil(stride);
        let fb = rect.bottom() / stride;
        let fr = rect.right() / stride;
        if fb <= ft || fr <= fl {
            return Err(MixError::InvalidRange(format!(
                "pixel rect {rect:?} covers no full feature cell at stride {stride}"
            )));
        }
        Ok(Self {
            rect,
            feat_rect: Rect {
                top: ft,
                left: fl,
                height: fb - ft,
                width: fr - fl,
            },
            stride,
        })
    }
}

/// Ranges for the CutMix rectangle sampler: the rectangle area as a fraction
/// of the image and its height/width aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutMixRanges {
    pub area: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for CutMixRanges {
    fn default() -> Self {
        Self {
            area: (0.25, 0.5),
            aspect: (0.5, 2.0),
        }
    }
}

const SAMPLE_ATTEMPTS: usize = 128;

/// Samples a stride-aligned CutMix rectangle whose area fraction lies in the
/// configured range, uniform over valid positions given the sampled size.
pub fn sample_cutmix_spec(
    rng: &RngHandle,
    image_h: usize,
    image_w: usize,
    stride: usize,
    ranges: &CutMixRanges,
) -> Result<CutMixSpec, MixError> {
    let (area_lo, area_hi) = ranges.area;
    let (asp_lo, asp_hi) = ranges.aspect;
    if !(area_lo > 0.0 && area_lo <= area_hi && area_hi < 1.0) {
        return Err(MixError::InvalidRange(format!(
            "area range ({area_lo}, {area_hi}) must satisfy 0 < lo <= hi < 1"
        )));
    }
    if !(asp_lo > 0.0 && asp_lo <= asp_hi) {
        return Err(MixError::InvalidRange(format!(
            "aspect range ({asp_lo}, {asp_hi}) must satisfy 0 < lo <= hi"
        )));
    }
    if image_h < stride || image_w < stride || stride == 0 {
        return Err(MixError::InvalidRange(format!(
            "image {image_h}x{image_w} smaller than stride {stride}"
        )));
    }
    let aligned_h = (image_h / stride) * stride;
    let aligned_w = (image_w / stride) * stride;
    let total = (image_h * image_w) as f64;

    let mut r = rng.rng();
    let snap = |raw: f64, max: usize| -> usize {
        let cells = (raw / stride as f64).round() as usize;
        (cells.max(1) * stride).min(max)
    };
    for _ in 0..SAMPLE_ATTEMPTS {
        let a = r.gen_range(area_lo..=area_hi);
        let aspect = r.gen_range(asp_lo..=asp_hi);
        let rect_h = snap((a * total * aspect).sqrt(), aligned_h);
        let rect_w = snap((a * total / aspect).sqrt(), aligned_w);
        let fraction = (rect_h * rect_w) as f64 / total;
        if fraction < area_lo || fraction > area_hi {
            continue;
        }
        let top = stride * r.gen_range(0..=(aligned_h - rect_h) / stride);
        let left = stride * r.gen_range(0..=(aligned_w - rect_w) / stride);
        let rect = Rect {
            top,
            left,
            height: rect_h,
            width: rect_w,
        };
        return CutMixSpec::from_pixel_rect(rect, stride);
    }
    Err(MixError::NoValidRectangle(area_lo, area_hi))
}

/// Class subset selected for a ClassMix composite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMixSpec {
    pub classes: BTreeSet<u8>,
}

/// Picks ceil(half) of the classes present in the source label, uniformly.
pub fn sample_classmix_spec(
    rng: &RngHandle,
    source_label: &LabelMap,
) -> Result<ClassMixSpec, MixError> {
    let present = source_label.present_classes();
    if present.is_empty() {
        return Err(MixError::AllIgnore);
    }
    let take = present.len().div_ceil(2);
    let mut r = rng.rng();
    let classes = present
        .choose_multiple(&mut r, take)
        .copied()
        .collect::<BTreeSet<u8>>();
    Ok(ClassMixSpec { classes })
}

/// Which mixing operation produced a [`MixedSample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MixProvenance {
    CutMix(CutMixSpec),
    ClassMix(ClassMixSpec),
}

/// A composite image with its mixed label and the binary provenance mask.
/// `mask == 1` marks pixels coming from the pasted content (the target
/// rectangle for CutMix, the selected source classes for ClassMix).
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub image: ImageTensor,
    pub label: LabelMap,
    pub mask: Array2<u8>,
    pub provenance: MixProvenance,
}

fn check_same_dims(
    context: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(), MixError> {
    if a != b {
        return Err(MixError::ShapeMismatch {
            context,
            a: a.0,
            b: a.1,
            c: b.0,
            d: b.1,
        });
    }
    Ok(())
}

/// Pastes the target rectangle onto the source image; labels follow pixels.
pub fn apply_cutmix(
    source: &Sample,
    target: &Sample,
    spec: &CutMixSpec,
) -> Result<MixedSample, MixError> {
    let dims = source.image.dims();
    check_same_dims("cutmix source vs target", dims, target.image.dims())?;
    let (h, w) = dims;
    if spec.rect.bottom() > h || spec.rect.right() > w {
        return Err(MixError::InvalidRange(format!(
            "rect {:?} outside {h}x{w} image",
            spec.rect
        )));
    }
    let mut image = source.image.clone();
    let mut label = source.label.clone();
    let mut mask = Array2::<u8>::zeros((h, w));
    for y in spec.rect.top..spec.rect.bottom() {
        for x in spec.rect.left..spec.rect.right() {
            for c in 0..3 {
                image.data[[y, x, c]] = target.image.data[[y, x, c]];
            }
            label.data[[y, x]] = target.label.data[[y, x]];
            mask[[y, x]] = 1;
        }
    }
    Ok(MixedSample {
        image,
        label,
        mask,
        provenance: MixProvenance::CutMix(*spec),
    })
}

/// Pastes all pixels of the selected source classes onto the target image;
/// remaining pixels keep the target image and its pseudo-label.
pub fn apply_classmix(
    source: &Sample,
    target_image: &ImageTensor,
    target_pseudo: &LabelMap,
    spec: &ClassMixSpec,
) -> Result<MixedSample, MixError> {
    let dims = source.image.dims();
    check_same_dims("classmix source vs target image", dims, target_image.dims())?;
    check_same_dims("classmix source vs pseudo label", dims, target_pseudo.dims())?;
    let (h, w) = dims;
    let mut image = target_image.clone();
    let mut label = target_pseudo.clone();
    let mut mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if spec.classes.contains(&source.label.data[[y, x]]) {
                for c in 0..3 {
                    image.data[[y, x, c]] = source.image.data[[y, x, c]];
                }
                label.data[[y, x]] = source.label.data[[y, x]];
                mask[[y, x]] = 1;
            }
        }
    }
    Ok(MixedSample {
        image,
        label,
        mask,
        provenance: MixProvenance::ClassMix(spec.clone()),
    })
}

/// Color jitter ranges (as max deviation of the multiplicative factor from 1)
/// and the Gaussian blur sigma range applied to mixed images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for PhotometricParams {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            blur_sigma: (0.0, 1.2),
        }
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Color jitter followed by Gaussian blur, deterministic given the handle.
/// Labels and masks are never touched. All-zero ranges give the identity.
pub fn photometric_augment(
    image: &ImageTensor,
    rng: &RngHandle,
    params: &PhotometricParams,
) -> ImageTensor {
    let mut r = rng.rng();
    let factor = |r: &mut rand_chacha::ChaCha12Rng, strength: f64| -> f64 {
        let lo = (1.0 - strength).max(0.0);
        let hi = 1.0 + strength;
        r.gen_range(lo..=hi)
    };
    let fb = factor(&mut r, params.brightness);
    let fc = factor(&mut r, params.contrast);
    let fs = factor(&mut r, params.saturation);
    let sigma = r.gen_range(params.blur_sigma.0..=params.blur_sigma.1);

    let mut out = image.clone();
    let (h, w) = out.dims();
    if fb != 1.0 {
        out.data.mapv_inplace(|v| (v * fb).clamp(0.0, 1.0));
    }
    if fc != 1.0 {
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                mean += luma(
                    out.data[[y, x, 0]],
                    out.data[[y, x, 1]],
                    out.data[[y, x, 2]],
                );
            }
        }
        mean /= (h * w) as f64;
        out.data.mapv_inplace(|v| ((v - mean) * fc + mean).clamp(0.0, 1.0));
    }
    if fs != 1.0 {
        for y in 0..h {
            for x in 0..w {
                let g = luma(
                    out.data[[y, x, 0]],
                    out.data[[y, x, 1]],
                    out.data[[y, x, 2]],
                );
                for c in 0..3 {
                    let v = out.data[[y, x, c]];
                    out.data[[y, x, c]] = (g + (v - g) * fs).clamp(0.0, 1.0);
                }
            }
        }
    }
    if sigma > 0.0 {
        gaussian_blur_inplace(&mut out, sigma);
    }
    out
}

/// Separable Gaussian blur with replicate borders.
fn gaussian_blur_inplace(image: &mut ImageTensor, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let (h, w) = image.dims();
    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    // horizontal pass
    let src = image.data.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as i64 + ki as i64 - radius, w);
                    acc += kv * src[[y, sx, c]];
                }
                image.data[[y, x, c]] = acc;
            }
        }
    }
    // vertical pass
    let src = image.data.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as i64 + ki as i64 - radius, h);
                    acc += kv * src[[sy, x, c]];
                }
                image.data[[y, x, c]] = acc.clamp(0.0, 1.0);
            }
        }
    }
}

/// Downsamples a binary pixel mask to the feature grid: a cell is set when
/// at least half of its stride x stride footprint is set.
pub fn downsample_mask(mask: &Array2<u8>, stride: usize, feat_h: usize, feat_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::<u8>::zeros((feat_h, feat_w));
    for fy in 0..feat_h {
        for fx in 0..feat_w {
            let y0 = fy * stride;
            let x0 = fx * stride;
            let y1 = (y0 + stride).min(h);
            let x1 = (x0 + stride).min(w);
            let mut set = 0usize;
            let mut count = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    set += mask[[y, x]] as usize;
                    count += 1;
                }
            }
            if count > 0 && 2 * set >= count {
                out[[fy, fx]] = 1;
            }
        }
    }
    out
}

/// Majority-vote label downsampling. IGNORE pixels are excluded from the
/// vote; an all-IGNORE cell stays IGNORE. Ties break toward the lowest id.
pub fn downsample_label_majority(
    label: &LabelMap,
    stride: usize,
    feat_h: usize,
    feat_w: usize,
) -> LabelMap {
    let (h, w) = label.dims();
    let mut out = Array2::<u8>::from_elem((feat_h, feat_w), IGNORE);
    for fy in 0..feat_h {
        for fx in 0..feat_w {
            let y0 = fy * stride;
            let x0 = fx * stride;
            let y1 = (y0 + stride).min(h);
            let x1 = (x0 + stride).min(w);
            let mut counts = [0u32; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = label.data[[y, x]];
                    if v != IGNORE {
                        counts[v as usize] += 1;
                    }
                }
            }
            let mut best = IGNORE;
            let mut best_count = 0u32;
            for (id, &count) in counts.iter().enumerate().take(255) {
                if count > best_count {
                    best_count = count;
                    best = id as u8;
                }
            }
            out[[fy, fx]] = best;
        }
    }
    LabelMap::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::streams;
    use ndarray::{Array2, Array3};

    fn flat_sample(h: usize, w: usize, value: f64, class: u8) -> Sample {
        Sample::new(
            ImageTensor::new(Array3::from_elem((h, w, 3), value)).unwrap(),
            LabelMap::filled(h, w, class),
        )
        .unwrap()
    }

    #[test]
    fn fixed_area_forces_square() {
        let rng = RngHandle::new(7).substream(streams::CUTMIX_RECT, 0);
        let ranges = CutMixRanges {
            area: (0.25, 0.25),
            aspect: (1.0, 1.0),
        };
        let spec = sample_cutmix_spec(&rng, 64, 64, 8, &ranges).unwrap();
        assert_eq!((spec.rect.height, spec.rect.width), (32, 32));
        assert_eq!(
            (spec.feat_rect.height, spec.feat_rect.width),
            (4, 4),
            "feature rect must be the pixel rect divided by stride"
        );
    }

    #[test]
    fn sampled_rects_stay_in_bounds_and_range() {
        let ranges = CutMixRanges {
            area: (0.1, 0.5),
            aspect: (0.5, 2.0),
        };
        for i in 0..1000 {
            let rng = RngHandle::new(3).substream(streams::CUTMIX_RECT, i);
            let spec = sample_cutmix_spec(&rng, 64, 64, 8, &ranges).unwrap();
            assert!(spec.rect.bottom() <= 64 && spec.rect.right() <= 64);
            let frac = spec.rect.area() as f64 / (64.0 * 64.0);
            assert!((0.1..=0.5).contains(&frac), "area fraction {frac}");
            assert!(spec.feat_rect.area() > 0);
        }
    }

    #[test]
    fn exact_division_feature_rect() {
        let spec = CutMixSpec::from_pixel_rect(
            Rect {
                top: 8,
                left: 8,
                height: 16,
                width: 16,
            },
            8,
        )
        .unwrap();
        assert_eq!(
            spec.feat_rect,
            Rect {
                top: 1,
                left: 1,
                height: 2,
                width: 2
            }
        );
    }

    #[test]
    fn impossible_area_range_is_rejected() {
        let rng = RngHandle::new(0);
        let ranges = CutMixRanges {
            area: (0.9, 0.95),
            aspect: (1.0, 1.0),
        };
        let err = sample_cutmix_spec(&rng, 64, 64, 8, &ranges).unwrap_err();
        assert!(matches!(err, MixError::NoValidRectangle(..)));
    }

    #[test]
    fn cutmix_full_rectangle_equals_target() {
        let source = flat_sample(16, 16, 0.2, 1);
        let target = flat_sample(16, 16, 0.8, 3);
        let spec = CutMixSpec::from_pixel_rect(
            Rect {
                top: 0,
                left: 0,
                height: 16,
                width: 16,
            },
            8,
        )
        .unwrap();
        let mixed = apply_cutmix(&source, &target, &spec).unwrap();
        assert_eq!(mixed.image, target.image);
        assert_eq!(mixed.label, target.label);
        assert!(mixed.mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn cutmix_pixel_counts() {
        let source = flat_sample(64, 64, 0.2, 1);
        let target = flat_sample(64, 64, 0.8, 3);
        let spec = CutMixSpec::from_pixel_rect(
            Rect {
                top: 16,
                left: 8,
                height: 32,
                width: 32,
            },
            8,
        )
        .unwrap();
        let mixed = apply_cutmix(&source, &target, &spec).unwrap();
        let target_pixels = mixed.label.data.iter().filter(|&&v| v == 3).count();
        let source_pixels = mixed.label.data.iter().filter(|&&v| v == 1).count();
        assert_eq!(target_pixels, 1024);
        assert_eq!(source_pixels, 3072);
    }

    #[test]
    fn classmix_half_of_present_classes() {
        let mut label = LabelMap::filled(4, 4, 0);
        label.data[[0, 0]] = 1;
        label.data[[0, 1]] = 2;
        label.data[[0, 2]] = 3;
        let rng = RngHandle::new(11).substream(streams::CLASSMIX_SELECT, 0);
        let spec = sample_classmix_spec(&rng, &label).unwrap();
        assert_eq!(spec.classes.len(), 2);
        for c in &spec.classes {
            assert!([0, 1, 2, 3].contains(c));
        }
    }

    #[test]
    fn classmix_single_class_selects_it() {
        let label = LabelMap::filled(4, 4, 5);
        let rng = RngHandle::new(1);
        let spec = sample_classmix_spec(&rng, &label).unwrap();
        assert_eq!(spec.classes, BTreeSet::from([5]));
    }

    #[test]
    fn classmix_all_ignore_errors() {
        let label = LabelMap::filled(4, 4, IGNORE);
        assert!(matches!(
            sample_classmix_spec(&RngHandle::new(0), &label),
            Err(MixError::AllIgnore)
        ));
    }

    #[test]
    fn classmix_selection_frequency() {
        let mut label = LabelMap::filled(2, 2, 0);
        label.data[[0, 1]] = 1;
        label.data[[1, 0]] = 2;
        label.data[[1, 1]] = 3;
        let mut hits = [0usize; 4];
        let trials = 1000;
        for i in 0..trials {
            let rng = RngHandle::new(99).substream(streams::CLASSMIX_SELECT, i);
            let spec = sample_classmix_spec(&rng, &label).unwrap();
            for c in spec.classes {
                hits[c as usize] += 1;
            }
        }
        for (c, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            assert!(
                (freq - 0.5).abs() <= 0.05,
                "class {c} selected with frequency {freq}"
            );
        }
    }

    #[test]
    fn classmix_full_selection_equals_source() {
        let source = flat_sample(8, 8, 0.3, 2);
        let target = flat_sample(8, 8, 0.7, 4);
        let spec = ClassMixSpec {
            classes: BTreeSet::from([2]),
        };
        let mixed = apply_classmix(&source, &target.image, &target.label, &spec).unwrap();
        assert_eq!(mixed.image, source.image);
        assert_eq!(mixed.label, source.label);
    }

    #[test]
    fn classmix_disjoint_selection_equals_target() {
        let source = flat_sample(8, 8, 0.3, 2);
        let target = flat_sample(8, 8, 0.7, 4);
        let spec = ClassMixSpec {
            classes: BTreeSet::from([9]),
        };
        let mixed = apply_classmix(&source, &target.image, &target.label, &spec).unwrap();
        assert_eq!(mixed.image, target.image);
        assert_eq!(mixed.label, target.label);
        assert!(mixed.mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn classmix_checkerboard_composition() {
        let (h, w) = (8, 8);
        let mut source = flat_sample(h, w, 0.3, 0);
        for y in 0..h {
            for x in 0..w {
                if (y + x) % 2 == 1 {
                    source.label.data[[y, x]] = 1;
                }
            }
        }
        let target = flat_sample(h, w, 0.7, 4);
        let spec = ClassMixSpec {
            classes: BTreeSet::from([0]),
        };
        let mixed = apply_classmix(&source, &target.image, &target.label, &spec).unwrap();
        for y in 0..h {
            for x in 0..w {
                if (y + x) % 2 == 0 {
                    assert_eq!(mixed.label.data[[y, x]], 0);
                    assert_eq!(mixed.image.data[[y, x, 0]], 0.3);
                } else {
                    assert_eq!(mixed.label.data[[y, x]], 4);
                    assert_eq!(mixed.image.data[[y, x, 0]], 0.7);
                }
            }
        }
    }

    #[test]
    fn null_augmentation_is_identity() {
        let image = ImageTensor::new(Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 3) % 97) as f64 / 96.0
        }))
        .unwrap();
        let params = PhotometricParams {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            blur_sigma: (0.0, 0.0),
        };
        let out = photometric_augment(&image, &RngHandle::new(5), &params);
        assert_eq!(out, image);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let image = ImageTensor::new(Array3::from_elem((16, 16, 3), 0.42)).unwrap();
        let params = PhotometricParams {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            blur_sigma: (4.0, 4.0),
        };
        let out = photometric_augment(&image, &RngHandle::new(5), &params);
        for v in out.data.iter() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn augmentation_is_deterministic() {
        let image = ImageTensor::new(Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            ((y * 13 + x * 5 + c) % 89) as f64 / 88.0
        }))
        .unwrap();
        let params = PhotometricParams::default();
        let rng = RngHandle::new(33).substream(streams::PHOTO_CUTMIX, 12);
        let a = photometric_augment(&image, &rng, &params);
        let b = photometric_augment(&image, &rng, &params);
        assert_eq!(a, b);
    }

    #[test]
    fn mask_downsample_matches_feature_rect_for_aligned_rects() {
        let source = flat_sample(64, 64, 0.1, 0);
        let target = flat_sample(64, 64, 0.9, 1);
        for i in 0..50 {
            let rng = RngHandle::new(17).substream(streams::CUTMIX_RECT, i);
            let spec = sample_cutmix_spec(&rng, 64, 64, 8, &CutMixRanges::default()).unwrap();
            let mixed = apply_cutmix(&source, &target, &spec).unwrap();
            let down = downsample_mask(&mixed.mask, 8, 8, 8);
            for fy in 0..8 {
                for fx in 0..8 {
                    let expect = spec.feat_rect.contains(fy, fx) as u8;
                    assert_eq!(down[[fy, fx]], expect, "cell ({fy}, {fx}) of {spec:?}");
                }
            }
        }
    }

    #[test]
    fn label_majority_downsample() {
        let mut label = LabelMap::filled(8, 8, 2);
        // top-left block: 5 of 16 pixels are class 1, so class 2 wins
        label.data[[0, 0]] = 1;
        label.data[[0, 1]] = 1;
        label.data[[1, 0]] = 1;
        label.data[[1, 1]] = 1;
        label.data[[2, 0]] = 1;
        let down = downsample_label_majority(&label, 4, 2, 2);
        assert_eq!(down.data[[0, 0]], 2);
        // all-IGNORE block stays IGNORE
        let mut label = LabelMap::filled(8, 8, IGNORE);
        label.data[[4, 4]] = 3;
        let down = downsample_label_majority(&label, 4, 2, 2);
        assert_eq!(down.data[[0, 0]], IGNORE);
        assert_eq!(down.data[[1, 1]], 3);
    }
}
