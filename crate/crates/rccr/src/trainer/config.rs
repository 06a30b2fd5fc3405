//! Training configuration: every paper hyperparameter plus the ablation
//! switches, with consistency validation across flags.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::contrastive::ContrastiveConfig;
use crate::mixing::{CutMixRanges, PhotometricParams};
use crate::models::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Contrast(#[from] crate::contrastive::ContrastError),
}

/// The ablation-table switches. Aliases match the table column names, so
/// overrides like `ablation.MB=false` work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    #[serde(alias = "RWC")]
    pub rwc: bool,
    #[serde(alias = "NS_R")]
    pub ns_random: bool,
    #[serde(alias = "NS_C")]
    pub ns_category: bool,
    #[serde(alias = "PS")]
    pub positive_sampling: bool,
    #[serde(alias = "MB")]
    pub memory_bank: bool,
    pub use_projector: bool,
    /// Route the contrastive loss over raw encoder features z instead of
    /// projector embeddings e.
    pub contrast_on_z: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::row_v()
    }
}

impl AblationFlags {
    /// No contrastive branch at all.
    pub fn baseline() -> Self {
        Self {
            rwc: false,
            ns_random: false,
            ns_category: false,
            positive_sampling: false,
            memory_bank: false,
            use_projector: false,
            contrast_on_z: false,
        }
    }

    /// RWC loss only.
    pub fn row_i() -> Self {
        Self {
            rwc: true,
            use_projector: true,
            ..Self::baseline()
        }
    }

    /// RWC + random negative sampling.
    pub fn row_ii() -> Self {
        Self {
            ns_random: true,
            ..Self::row_i()
        }
    }

    /// ... + category-aware negative sampling.
    pub fn row_iii() -> Self {
        Self {
            ns_category: true,
            ..Self::row_ii()
        }
    }

    /// ... + positive sampling.
    pub fn row_iv() -> Self {
        Self {
            positive_sampling: true,
            ..Self::row_iii()
        }
    }

    /// ... + memory bank: the full method.
    pub fn row_v() -> Self {
        Self {
            memory_bank: true,
            ..Self::row_iv()
        }
    }

    /// Full sampling stack but contrast over raw features z.
    pub fn row_v_on_z() -> Self {
        Self {
            use_projector: false,
            contrast_on_z: true,
            ..Self::row_v()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.rwc {
            for (on, name) in [
                (self.ns_random, "ns_random"),
                (self.ns_category, "ns_category"),
                (self.positive_sampling, "positive_sampling"),
                (self.memory_bank, "memory_bank"),
                (self.contrast_on_z, "contrast_on_z"),
            ] {
                if on {
                    return Err(ConfigError::Invalid(format!("{name} requires rwc = true")));
                }
            }
            return Ok(());
        }
        if self.contrast_on_z && self.use_projector {
            return Err(ConfigError::Invalid(
                "contrast_on_z bypasses the projector; disable use_projector".into(),
            ));
        }
        if !self.contrast_on_z && !self.use_projector {
            return Err(ConfigError::Invalid(
                "embedding-route contrast requires use_projector = true".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
        }
    }
}

/// Loss weights. `lambda_ce` stays at 1 in the paper's setup; the
/// consistency confidence threshold follows the DACS-style weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_cons: f64,
    pub lambda_cont: f64,
    /// Teacher max-probability a target pixel must exceed to count as
    /// confident in the consistency weight.
    pub confidence_threshold: f64,
    /// Also apply a cross-entropy loss on the CutMix branch (off by
    /// default; the method lists only L_CE, L_cons, L_cont).
    pub cutmix_ce: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_cons: 1.0,
            lambda_cont: 1.0,
            confidence_threshold: 0.9,
            cutmix_ce: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Number of retained batches ("last three batches").
    pub depth: usize,
    /// Entries kept per batch slab.
    pub capacity: usize,
    /// Serialize bank contents into checkpoints so resumed runs see
    /// identical negative pools.
    pub in_checkpoint: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            capacity: 256,
            in_checkpoint: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    pub cutmix: CutMixRanges,
    pub photometric: PhotometricParams,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            cutmix: CutMixRanges::default(),
            photometric: PhotometricParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastSection {
    pub temperature: f64,
    pub positive_threshold: f64,
}

impl Default for ContrastSection {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            positive_threshold: 0.75,
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub ema_decay: f64,
    /// Ramp the effective decay as min(1 - 1/(step+1), ema_decay) so the
    /// teacher is a true running average from step 0 instead of staying
    /// pinned to its random initialization.
    pub ema_warmup: bool,
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    pub loss: LossWeights,
    pub contrastive: ContrastSection,
    pub bank: BankConfig,
    pub mixing: MixingConfig,
    pub ablation: AblationFlags,
    /// Named class subsets for additional mIoU means in eval reports.
    pub eval_subsets: BTreeMap<String, Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 500,
            batch_size: 2,
            eval_every: 250,
            checkpoint_every: 500,
            ema_decay: 0.999,
            ema_warmup: true,
            model: ModelConfig::default(),
            optimizer: OptimConfig::default(),
            loss: LossWeights::default(),
            contrastive: ContrastSection::default(),
            bank: BankConfig::default(),
            mixing: MixingConfig::default(),
            ablation: AblationFlags::default(),
            eval_subsets: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.ablation.validate()?;
        self.contrastive_config().validate()?;
        if self.batch_size == 0 || self.batch_size > 256 {
            return Err(ConfigError::Invalid(format!(
                "batch_size {} outside [1, 256]",
                self.batch_size
            )));
        }
        for (value, name) in [
            (self.loss.lambda_ce, "lambda_ce"),
            (self.loss.lambda_cons, "lambda_cons"),
            (self.loss.lambda_cont, "lambda_cont"),
        ] {
            if !(value >= 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(ConfigError::Invalid(format!(
                "ema_decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.loss.confidence_threshold) {
            return Err(ConfigError::Invalid(format!(
                "confidence_threshold {} outside [0, 1]",
                self.loss.confidence_threshold
            )));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(ConfigError::Invalid("lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.contrastive.temperature,
            positive_threshold: self.contrastive.positive_threshold,
            use_ns_random: self.ablation.ns_random,
            use_ns_category: self.ablation.ns_category,
            use_positive_sampling: self.ablation.positive_sampling,
            use_memory_bank: self.ablation.memory_bank && self.bank.depth > 0,
        }
    }

    /// Source-supervision only: no consistency, no contrast.
    pub fn source_only(mut self) -> Self {
        self.loss.lambda_cons = 0.0;
        self.ablation = AblationFlags::baseline();
        self
    }

    pub fn with_flags(mut self, flags: AblationFlags) -> Self {
        self.ablation = flags;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn table_rows_are_valid_and_cumulative() {
        let rows = [
            AblationFlags::baseline(),
            AblationFlags::row_i(),
            AblationFlags::row_ii(),
            AblationFlags::row_iii(),
            AblationFlags::row_iv(),
            AblationFlags::row_v(),
            AblationFlags::row_v_on_z(),
        ];
        for row in rows {
            row.validate().unwrap();
        }
        assert!(AblationFlags::row_v().memory_bank);
        assert!(!AblationFlags::row_iv().memory_bank);
    }

    #[test]
    fn sampling_flags_require_rwc() {
        let flags = AblationFlags {
            ns_category: true,
            ..AblationFlags::baseline()
        };
        let err = flags.validate().unwrap_err();
        assert!(err.to_string().contains("requires rwc"));
    }

    #[test]
    fn contrast_on_z_excludes_projector() {
        let flags = AblationFlags {
            contrast_on_z: true,
            ..AblationFlags::row_v()
        };
        assert!(flags.validate().is_err());
        AblationFlags::row_v_on_z().validate().unwrap();
    }

    #[test]
    fn rwc_without_projector_or_z_route_is_rejected() {
        let flags = AblationFlags {
            use_projector: false,
            ..AblationFlags::row_i()
        };
        assert!(flags.validate().is_err());
    }

    #[test]
    fn toml_aliases_for_table_columns() {
        let cfg: AblationFlags = toml::from_str(
            "RWC = true\nNS_R = true\nNS_C = false\nPS = false\nMB = false\nuse_projector = true\ncontrast_on_z = false\n",
        )
        .unwrap();
        assert!(cfg.rwc && cfg.ns_random);
        assert!(!cfg.ns_category);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<TrainConfig>("foo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn negative_weight_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.loss.lambda_cont = -0.5;
        assert!(cfg.validate().is_err());
    }
}
