//! TOML run configuration.
//!
//! ```toml
//! [mix]
//! enabled = true
//! gate_p = 0.5
//! ext_p = 0.5
//! beta_a = 0.2
//! beta_b = 0.2
//!
//! [encoder]
//! preset = "standard"      # or "desk"; the keys below override the preset
//! widths = [16, 32, 64, 128]
//! feature_dim = 256
//!
//! [mmd]
//! bandwidth_multipliers = [0.25, 0.5, 1.0, 2.0, 4.0]
//!
//! [ortho]
//! norm = "frobenius"
//!
//! [fusion]
//! heads = 8
//! head_dim = 32
//! tokens = 8
//!
//! [train]
//! lambda_m = 0.1
//! lambda_d = 0.5
//! learning_rate = 0.001
//! batch_per_domain = 64
//! epochs = 50
//! patience = 10
//! seed = 0
//! variant = "full"
//!
//! [data]
//! samples_per_class = 100
//! seed = 0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::MixConfig;
use crate::disentangle::KernelSpec;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::harness::{TrainConfig, Variant};
use crate::nn::AdamConfig;
use crate::synthgen::NoiseConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub preset: String,
    pub widths: Option<[usize; 4]>,
    pub strides: Option<[usize; 4]>,
    pub stem_kernel: Option<usize>,
    pub stem_stride: Option<usize>,
    pub feature_dim: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { preset: "standard".into(), widths: None, strides: None, stem_kernel: None, stem_stride: None, feature_dim: None }
    }
}

impl EncoderSection {
    pub fn resolve(&self) -> Result<EncoderConfig> {
        let mut e = match self.preset.as_str() {
            "standard" => EncoderConfig::default(),
            "desk" => EncoderConfig::desk(),
            other => return Err(Error::InvalidArgument(format!("unknown encoder preset {other:?}"))),
        };
        if let Some(w) = self.widths {
            e.widths = w;
        }
        if let Some(s) = self.strides {
            e.strides = s;
        }
        if let Some(k) = self.stem_kernel {
            e.stem_kernel = k;
        }
        if let Some(s) = self.stem_stride {
            e.stem_stride = s;
        }
        if let Some(d) = self.feature_dim {
            e.feature_dim = d;
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdSection {
    pub bandwidth_multipliers: Vec<f64>,
}

impl Default for MmdSection {
    fn default() -> Self {
        MmdSection { bandwidth_multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthoSection {
    pub norm: String,
}

impl Default for OrthoSection {
    fn default() -> Self {
        OrthoSection { norm: "frobenius".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub learning_rate: f64,
    pub batch_per_domain: usize,
    pub epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub variant: Variant,
    pub bn_momentum: f64,
    pub eval_chunk: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lambda_m: t.lambda_m,
            lambda_d: t.lambda_d,
            learning_rate: t.adam.learning_rate,
            batch_per_domain: t.batch_per_domain,
            epochs: t.epochs,
            patience: t.patience,
            val_fraction: t.val_fraction,
            seed: t.seed,
            variant: t.variant,
            bn_momentum: t.bn_momentum,
            eval_chunk: t.eval_chunk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub samples_per_class: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { samples_per_class: 100, seed: 0, noise: NoiseConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mix: MixConfig,
    pub encoder: EncoderSection,
    pub mmd: MmdSection,
    pub ortho: OrthoSection,
    pub fusion: FusionConfig,
    pub train: TrainSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        if self.ortho.norm != "frobenius" {
            return Err(Error::InvalidArgument(format!("ortho.norm {:?} is not supported (use \"frobenius\")", self.ortho.norm)));
        }
        let t = &self.train;
        let cfg = TrainConfig {
            lambda_m: t.lambda_m,
            lambda_d: t.lambda_d,
            adam: AdamConfig { learning_rate: t.learning_rate, ..AdamConfig::default() },
            batch_per_domain: t.batch_per_domain,
            epochs: t.epochs,
            patience: t.patience,
            val_fraction: t.val_fraction,
            seed: t.seed,
            variant: t.variant,
            mix: self.mix,
            encoder: self.encoder.resolve()?,
            fusion: self.fusion,
            kernel: KernelSpec::MedianHeuristic { multipliers: self.mmd.bandwidth_multipliers.clone() },
            bn_momentum: t.bn_momentum,
            eval_chunk: t.eval_chunk,
        };
        cfg.validate()?;
        cfg.fusion.validate(cfg.encoder.feature_dim)?;
        Ok(cfg)
    }
}
