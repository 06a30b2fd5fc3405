//! Keyed checkpoint archive: student and teacher parameters (including both
//! projectors), optimizer state, step counters, the full resolved config,
//! and optionally the memory bank. JSON keeps the archive inspectable;
//! `f64` values round-trip bit-exactly through serde_json.

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use super::config::TrainConfig;
use super::TrainError;
use crate::membank::MemoryBank;
use crate::models::Parameterized;

/// Shape plus flat data in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_view(view: &ArrayViewD<'_, f64>) -> Self {
        Self {
            shape: view.shape().to_vec(),
            data: view.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<ArrayD<f64>, TrainError> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| TrainError::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Crate version that wrote the archive; loads require a matching
    /// major.minor.
    pub format_version: String,
    pub step: u64,
    pub ema_step: u64,
    pub config: TrainConfig,
    pub student: BTreeMap<String, TensorData>,
    pub teacher: BTreeMap<String, TensorData>,
    pub velocity: Vec<TensorData>,
    pub bank: Option<MemoryBank>,
}

pub(super) fn params_to_map(model: &impl Parameterized) -> BTreeMap<String, TensorData> {
    model
        .param_names()
        .into_iter()
        .zip(model.params())
        .map(|(name, view)| (name, TensorData::from_view(&view)))
        .collect()
}

pub(super) fn load_params_from_map(
    model: &mut impl Parameterized,
    map: &BTreeMap<String, TensorData>,
    which: &str,
) -> Result<(), TrainError> {
    let names = model.param_names();
    for (name, mut view) in names.iter().zip(model.params_mut()) {
        let tensor = map.get(name).ok_or_else(|| {
            TrainError::Checkpoint(format!("{which} archive is missing parameter {name}"))
        })?;
        if tensor.shape != view.shape() {
            return Err(TrainError::Checkpoint(format!(
                "{which}.{name}: checkpoint shape {:?} vs model shape {:?}",
                tensor.shape,
                view.shape()
            )));
        }
        for (dst, src) in view.iter_mut().zip(&tensor.data) {
            *dst = *src;
        }
    }
    Ok(())
}

pub fn version_compatible(written: &str, current: &str) -> bool {
    let mm = |v: &str| {
        let mut parts = v.split('.');
        let major = parts.next().unwrap_or("0").to_string();
        let minor = parts.next().unwrap_or("0").to_string();
        (major, minor)
    };
    mm(written) == mm(current)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = std::fs::File::create(path)
            .map_err(|e| TrainError::Io(format!("create {}: {e}", path.display())))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| TrainError::Io(format!("write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file = std::fs::File::open(path)
            .map_err(|e| TrainError::Io(format!("open {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| TrainError::Checkpoint(format!("parse {}: {e}", path.display())))?;
        let current = env!("CARGO_PKG_VERSION");
        if !version_compatible(&ckpt.format_version, current) {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint written by version {} cannot load under {}",
                ckpt.format_version, current
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_gate_is_major_minor() {
        assert!(version_compatible("0.1.0", "0.1.3"));
        assert!(!version_compatible("0.2.0", "0.1.0"));
        assert!(!version_compatible("1.1.0", "0.1.0"));
    }

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let data = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| {
            (ix[0] as f64 * 0.1 + ix[1] as f64).sin() * 1e-7
        });
        let td = TensorData::from_view(&data.view());
        let json = serde_json::to_string(&td).unwrap();
        let back: TensorData = serde_json::from_str(&json).unwrap();
        let restored = back.to_array().unwrap();
        for (a, b) in data.iter().zip(restored.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
