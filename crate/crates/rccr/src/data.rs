//! Synthetic source/target scene generation with a controllable photometric
//! domain shift, plus a manifest adapter for file-backed datasets.
//!
//! Source and target scenes with the same (seed, index) share geometry and
//! therefore labels exactly; the domains differ only in appearance (hue
//! rotation, illumination gradient, noise). Target training data is exposed
//! through a guard view that has no label accessor at all, so the trainer
//! cannot touch target labels even by accident.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::core::{streams, ImageTensor, LabelMap, RngHandle, IGNORE};
use crate::mixing::Sample;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest {0}: {1}")]
    BadManifest(PathBuf, String),
    #[error("manifest {0} lists no image/label pairs")]
    EmptyManifest(PathBuf),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("label {path} contains id {id} with no remap entry")]
    UnmappedId { path: PathBuf, id: u8 },
    #[error("index {index} out of range for dataset of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("bad scene spec: {0}")]
    BadSpec(String),
}

/// Which photometric rendering a synthetic scene gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Geometry and appearance parameters of the synthetic benchmark.
///
/// C-1 foreground shape classes are drawn over a gray background; the class
/// id determines the shape kind and base color. The target domain applies a
/// hue rotation, a vertical illumination gradient, and stronger noise on top
/// of the identical base rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub num_classes: usize,
    pub objects_per_scene: (usize, usize),
    /// Object area as a fraction of the canvas.
    pub object_area: (f64, f64),
    pub source_noise: f64,
    pub target_hue_rotation_deg: f64,
    pub target_noise: f64,
    /// Vertical illumination gradient strength g: rows scale 1-g .. 1+g.
    pub target_illumination: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            canvas_h: 64,
            canvas_w: 64,
            num_classes: 5,
            objects_per_scene: (2, 4),
            object_area: (0.05, 0.15),
            source_noise: 0.02,
            target_hue_rotation_deg: 20.0,
            target_noise: 0.06,
            target_illumination: 0.35,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(DataError::BadSpec(format!(
                "num_classes {} outside [2, 254]",
                self.num_classes
            )));
        }
        let (lo, hi) = self.object_area;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(DataError::BadSpec(format!(
                "object area range ({lo}, {hi}) must satisfy 0 < lo <= hi < 0.5"
            )));
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return Err(DataError::BadSpec("objects_per_scene range inverted".into()));
        }
        // the largest shape (triangle, height sqrt(2A)) must fit the canvas
        let max_extent = (2.0 * hi * (self.canvas_h * self.canvas_w) as f64).sqrt();
        if max_extent >= self.canvas_h.min(self.canvas_w) as f64 - 2.0 {
            return Err(DataError::BadSpec(format!(
                "object area {hi} too large for {}x{} canvas",
                self.canvas_h, self.canvas_w
            )));
        }
        Ok(())
    }

    /// Analytic estimate of per-class pixel frequencies under the painter
    /// model, treating per-object pixel coverage as independent. Index 0 is
    /// the background.
    pub fn expected_class_frequencies(&self) -> Vec<f64> {
        let q = 0.5 * (self.object_area.0 + self.object_area.1);
        let (k_lo, k_hi) = self.objects_per_scene;
        let mut background = 0.0;
        let mut count = 0.0;
        for k in k_lo..=k_hi {
            background += (1.0 - q).powi(k as i32);
            count += 1.0;
        }
        background /= count;
        let per_class = (1.0 - background) / (self.num_classes - 1) as f64;
        let mut out = vec![per_class; self.num_classes];
        out[0] = background;
        out
    }
}

fn class_color(class: u8) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.45], // background gray
        [0.85, 0.20, 0.20],
        [0.20, 0.80, 0.25],
        [0.20, 0.35, 0.85],
        [0.85, 0.80, 0.20],
        [0.75, 0.25, 0.80],
        [0.20, 0.80, 0.80],
        [0.90, 0.55, 0.15],
    ];
    let idx = if class == 0 {
        0
    } else {
        1 + ((class as usize - 1) % (PALETTE.len() - 1))
    };
    PALETTE[idx]
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    fn for_class(class: u8) -> Self {
        match (class as usize - 1) % 4 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Ring,
        }
    }
}

struct Object {
    kind: ShapeKind,
    class: u8,
    cy: f64,
    cx: f64,
    size: f64,
    color: [f64; 3],
}

impl Object {
    fn covers(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= self.size * self.size,
            ShapeKind::Square => dy.abs() <= self.size && dx.abs() <= self.size,
            ShapeKind::Triangle => {
                // upward isoceles triangle, apex at cy - size/2
                let h = self.size;
                let t = y - (self.cy - 0.5 * h);
                t >= 0.0 && t <= h && dx.abs() <= 0.5 * t
            }
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                let inner = 0.55 * self.size;
                d2 <= self.size * self.size && d2 >= inner * inner
            }
        }
    }

    fn half_extent(&self) -> f64 {
        match self.kind {
            ShapeKind::Disk | ShapeKind::Ring | ShapeKind::Square => self.size,
            ShapeKind::Triangle => 0.5 * self.size,
        }
    }
}

/// Hue rotation in RGB via the standard YIQ-axis approximation.
fn hue_rotate(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let rad = degrees.to_radians();
    let c = rad.cos();
    let s = rad.sin();
    let [r, g, b] = rgb;
    [
        (0.299 + 0.701 * c + 0.168 * s) * r
            + (0.587 - 0.587 * c + 0.330 * s) * g
            + (0.114 - 0.114 * c - 0.497 * s) * b,
        (0.299 - 0.299 * c - 0.328 * s) * r
            + (0.587 + 0.413 * c + 0.035 * s) * g
            + (0.114 - 0.114 * c + 0.292 * s) * b,
        (0.299 - 0.300 * c + 1.250 * s) * r
            + (0.587 - 0.588 * c - 1.050 * s) * g
            + (0.114 + 0.886 * c - 0.203 * s) * b,
    ]
}

/// Renders one scene. The geometry (and so the label map) depends only on
/// the handle, never on the domain; appearance noise draws from a
/// domain-specific stream.
pub fn generate_scene(
    spec: &SyntheticSceneSpec,
    handle: &RngHandle,
    domain: Domain,
) -> Result<Sample, DataError> {
    spec.validate()?;
    let (h, w) = (spec.canvas_h, spec.canvas_w);
    let total = (h * w) as f64;
    let mut geom = handle.substream(streams::DATA_GEOMETRY, 0).rng();

    let count = geom.gen_range(spec.objects_per_scene.0..=spec.objects_per_scene.1);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = geom.gen_range(1..spec.num_classes) as u8;
        let kind = ShapeKind::for_class(class);
        let area = geom.gen_range(spec.object_area.0..=spec.object_area.1) * total;
        let size = match kind {
            ShapeKind::Disk => (area / std::f64::consts::PI).sqrt(),
            ShapeKind::Square => 0.5 * area.sqrt(),
            ShapeKind::Triangle => (2.0 * area).sqrt(),
            ShapeKind::Ring => (area / (std::f64::consts::PI * (1.0 - 0.55f64.powi(2)))).sqrt(),
        };
        let base = class_color(class);
        let jitter = geom.gen_range(-0.06..0.06);
        let color = [
            (base[0] + jitter).clamp(0.0, 1.0),
            (base[1] + jitter).clamp(0.0, 1.0),
            (base[2] + jitter).clamp(0.0, 1.0),
        ];
        let mut obj = Object {
            kind,
            class,
            cy: 0.0,
            cx: 0.0,
            size,
            color,
        };
        let margin = obj.half_extent() + 1.0;
        obj.cy = geom.gen_range(margin..(h as f64 - margin));
        obj.cx = geom.gen_range(margin..(w as f64 - margin));
        objects.push(obj);
    }

    let bg = class_color(0);
    let mut image = Array3::from_shape_fn((h, w, 3), |(_, _, c)| bg[c]);
    let mut label = Array2::<u8>::zeros((h, w));
    for obj in &objects {
        for y in 0..h {
            for x in 0..w {
                if obj.covers(y as f64 + 0.5, x as f64 + 0.5) {
                    label[[y, x]] = obj.class;
                    for c in 0..3 {
                        image[[y, x, c]] = obj.color[c];
                    }
                }
            }
        }
    }

    match domain {
        Domain::Source => {
            if spec.source_noise > 0.0 {
                let mut noise = handle.substream(streams::DATA_SOURCE_APPEARANCE, 0).rng();
                for v in image.iter_mut() {
                    *v = (*v + noise.gen_range(-spec.source_noise..spec.source_noise))
                        .clamp(0.0, 1.0);
                }
            }
        }
        Domain::Target => {
            for y in 0..h {
                let illum =
                    1.0 + spec.target_illumination * (2.0 * y as f64 / (h - 1).max(1) as f64 - 1.0);
                for x in 0..w {
                    let rgb = hue_rotate(
                        [image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]],
                        spec.target_hue_rotation_deg,
                    );
                    for c in 0..3 {
                        image[[y, x, c]] = (rgb[c] * illum).clamp(0.0, 1.0);
                    }
                }
            }
            if spec.target_noise > 0.0 {
                let mut noise = handle.substream(streams::DATA_TARGET_APPEARANCE, 0).rng();
                for v in image.iter_mut() {
                    *v = (*v + noise.gen_range(-spec.target_noise..spec.target_noise))
                        .clamp(0.0, 1.0);
                }
            }
        }
    }

    Sample::new(
        ImageTensor::new(image).expect("canvas dims validated"),
        LabelMap::new(label),
    )
    .map_err(|e| DataError::BadSpec(e.to_string()))
}

enum DatasetKind {
    Synthetic {
        spec: SyntheticSceneSpec,
        domain: Domain,
        /// Offset into the scene index space; keeps train/val and
        /// source/target scene sets disjoint.
        base_index: u64,
    },
    Manifest {
        samples: Vec<Sample>,
    },
}

/// Deterministic index -> Sample mapping over one split of one domain.
pub struct DatasetHandle {
    seed: u64,
    len: usize,
    kind: DatasetKind,
}

impl DatasetHandle {
    pub fn synthetic(
        spec: SyntheticSceneSpec,
        domain: Domain,
        seed: u64,
        base_index: u64,
        len: usize,
    ) -> Result<Self, DataError> {
        spec.validate()?;
        Ok(Self {
            seed,
            len,
            kind: DatasetKind::Synthetic {
                spec,
                domain,
                base_index,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Full sample with its label; for source training and evaluation.
    pub fn sample(&self, index: usize) -> Result<Sample, DataError> {
        if index >= self.len {
            return Err(DataError::IndexOutOfRange {
                index,
                len: self.len,
            });
        }
        match &self.kind {
            DatasetKind::Synthetic {
                spec,
                domain,
                base_index,
            } => {
                let scene_id = base_index + index as u64;
                let handle =
                    RngHandle::new(self.seed ^ scene_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                generate_scene(spec, &handle, *domain)
            }
            DatasetKind::Manifest { samples } => Ok(samples[index].clone()),
        }
    }

    /// Label-free view for target-domain training.
    pub fn images_only(&self) -> TargetTrainView<'_> {
        TargetTrainView { inner: self }
    }
}

/// Guard over a target split: exposes images, never labels.
pub struct TargetTrainView<'a> {
    inner: &'a DatasetHandle,
}

impl TargetTrainView<'_> {
    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn image(&self, index: usize) -> Result<ImageTensor, DataError> {
        Ok(self.inner.sample(index)?.image)
    }
}

/// The three splits a training run needs.
pub struct DatasetBundle {
    pub source: DatasetHandle,
    pub target: DatasetHandle,
    pub val: DatasetHandle,
}

/// Dataset selection in the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_val: usize,
    pub scene: SyntheticSceneSpec,
    pub source_manifest: Option<PathBuf>,
    pub target_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Manifest,
}

fn default_data_seed() -> u64 {
    7
}
fn default_n_source() -> usize {
    64
}
fn default_n_val() -> usize {
    24
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            seed: default_data_seed(),
            n_source: default_n_source(),
            n_target: default_n_source(),
            n_val: default_n_val(),
            scene: SyntheticSceneSpec::default(),
            source_manifest: None,
            target_manifest: None,
            val_manifest: None,
        }
    }
}

const TARGET_BASE: u64 = 1 << 24;
const VAL_BASE: u64 = 1 << 25;

/// Builds the three dataset handles. Synthetic splits draw from disjoint
/// scene index ranges; manifest paths resolve relative to `base_dir`.
pub fn load_bundle(cfg: &DataConfig, base_dir: &Path) -> Result<DatasetBundle, DataError> {
    match cfg.kind {
        DataKind::Synthetic => Ok(DatasetBundle {
            source: DatasetHandle::synthetic(
                cfg.scene.clone(),
                Domain::Source,
                cfg.seed,
                0,
                cfg.n_source,
            )?,
            target: DatasetHandle::synthetic(
                cfg.scene.clone(),
                Domain::Target,
                cfg.seed,
                TARGET_BASE,
                cfg.n_target,
            )?,
            val: DatasetHandle::synthetic(
                cfg.scene.clone(),
                Domain::Target,
                cfg.seed,
                VAL_BASE,
                cfg.n_val,
            )?,
        }),
        DataKind::Manifest => {
            let resolve = |p: &Option<PathBuf>, which: &str| -> Result<PathBuf, DataError> {
                p.clone().ok_or_else(|| {
                    DataError::BadManifest(
                        base_dir.to_path_buf(),
                        format!("kind = \"manifest\" requires {which}_manifest"),
                    )
                })
            };
            Ok(DatasetBundle {
                source: adapter_load(&base_dir.join(resolve(&cfg.source_manifest, "source")?))?,
                target: adapter_load(&base_dir.join(resolve(&cfg.target_manifest, "target")?))?,
                val: adapter_load(&base_dir.join(resolve(&cfg.val_manifest, "val")?))?,
            })
        }
    }
}

/// On-disk manifest schema: image/label file pairs with an optional class-id
/// remap table. Paths are relative to the manifest's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    num_classes: usize,
    #[serde(default = "default_ignore")]
    ignore_value: u8,
    #[serde(default)]
    pairs: Vec<ManifestPair>,
    #[serde(default)]
    remap: Option<BTreeMap<String, u8>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPair {
    image: PathBuf,
    label: PathBuf,
}

fn default_ignore() -> u8 {
    IGNORE
}

/// Loads a manifest eagerly: every listed file is read, decoded, and
/// remapped now, so missing files and unmapped ids fail at load time.
pub fn adapter_load(manifest_path: &Path) -> Result<DatasetHandle, DataError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest: ManifestFile = toml::from_str(&text)
        .map_err(|e| DataError::BadManifest(manifest_path.to_path_buf(), e.to_string()))?;
    if manifest.pairs.is_empty() {
        return Err(DataError::EmptyManifest(manifest_path.to_path_buf()));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(manifest.pairs.len());
    for pair in &manifest.pairs {
        let image_path = dir.join(&pair.image);
        let label_path = dir.join(&pair.label);
        for p in [&image_path, &label_path] {
            if !p.exists() {
                return Err(DataError::MissingFile(p.clone()));
            }
        }
        let rgb = image::open(&image_path)
            .map_err(|source| DataError::Decode {
                path: image_path.clone(),
                source,
            })?
            .into_rgb8();
        let (w, h) = rgb.dimensions();
        let image = ImageTensor::new(Array3::from_shape_fn(
            (h as usize, w as usize, 3),
            |(y, x, c)| rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0,
        ))
        .map_err(|e| DataError::BadManifest(manifest_path.to_path_buf(), e.to_string()))?;

        let gray = image::open(&label_path)
            .map_err(|source| DataError::Decode {
                path: label_path.clone(),
                source,
            })?
            .into_luma8();
        let (lw, lh) = gray.dimensions();
        if (lw, lh) != (w, h) {
            return Err(DataError::BadManifest(
                manifest_path.to_path_buf(),
                format!("label {} size differs from its image", label_path.display()),
            ));
        }
        let mut label = Array2::<u8>::zeros((h as usize, w as usize));
        for y in 0..h as usize {
            for x in 0..w as usize {
                let raw = gray.get_pixel(x as u32, y as u32).0[0];
                let id = if raw == manifest.ignore_value {
                    IGNORE
                } else if let Some(remap) = &manifest.remap {
                    match remap.get(&raw.to_string()) {
                        Some(&mapped) => mapped,
                        None => {
                            return Err(DataError::UnmappedId {
                                path: label_path.clone(),
                                id: raw,
                            })
                        }
                    }
                } else if (raw as usize) < manifest.num_classes {
                    raw
                } else {
                    return Err(DataError::UnmappedId {
                        path: label_path.clone(),
                        id: raw,
                    });
                };
                label[[y, x]] = id;
            }
        }
        samples.push(
            Sample::new(image, LabelMap::new(label))
                .map_err(|e| DataError::BadManifest(manifest_path.to_path_buf(), e.to_string()))?,
        );
    }
    Ok(DatasetHandle {
        seed: 0,
        len: samples.len(),
        kind: DatasetKind::Manifest { samples },
    })
}
