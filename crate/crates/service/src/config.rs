//! TOML configuration. Every section is optional; CLI flags override keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cxrmetric_core::embedder::EmbedderConfig;
use cxrmetric_core::metric::LossConfig;
use cxrmetric_core::retrieval::DEFAULT_K;
use cxrmetric_core::synthdata::SynthConfig;
use cxrmetric_core::transfer::{CohortConfig, TransferConfig};

use crate::ServiceError;

/// Hard limits on any configured k.
pub const K_LIMITS: (usize, usize) = (1, 30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub manifest: PathBuf,
    /// Fitted transfer model; prediction is disabled without one.
    pub transfer_model: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub default_k: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Refuse an index or transfer model built from a different checkpoint.
    pub strict_hash: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("run/checkpoint"),
            index: PathBuf::from("run/index"),
            manifest: PathBuf::from("data/manifest.json"),
            transfer_model: None,
            host: "127.0.0.1".into(),
            port: 8080,
            default_k: DEFAULT_K,
            k_min: K_LIMITS.0,
            k_max: K_LIMITS.1,
            strict_hash: true,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let (lo, hi) = K_LIMITS;
        if self.k_min < lo || self.k_max > hi || self.k_min > self.k_max {
            return Err(ServiceError::Config(format!(
                "k bounds [{}, {}] must lie within [{lo}, {hi}]",
                self.k_min, self.k_max
            )));
        }
        if !(self.k_min..=self.k_max).contains(&self.default_k) {
            return Err(ServiceError::Config(format!(
                "default_k {} outside [{}, {}]",
                self.default_k, self.k_min, self.k_max
            )));
        }
        Ok(())
    }

    pub fn check_k(&self, k: usize) -> Result<usize, ServiceError> {
        if (self.k_min..=self.k_max).contains(&k) {
            Ok(k)
        } else {
            Err(ServiceError::BadRequest(format!(
                "k = {k} outside [{}, {}]",
                self.k_min, self.k_max
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Reflection pad for random training crops.
    pub crop_pad: usize,
    /// Neighbors used by the KNN diagnosis in evaluation commands.
    pub knn_k: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            crop_pad: 16,
            knn_k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: EmbedderConfig,
    pub train: LossConfig,
    pub transfer: TransferConfig,
    pub cohort: CohortConfig,
    pub service: ServiceConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.service.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// One seed for every stochastic stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.transfer.seed = seed;
        self.cohort.seed = seed;
    }
}
