use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{EmbedError, Embedder, EmbedderConfig};

const WEIGHTS_MAGIC: &[u8; 8] = b"CXRMW\x00\x01\x00";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint hash mismatch: meta says {expected}, weights hash to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error(transparent)]
    Model(#[from] EmbedError),
}

/// The portable half of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EmbedderConfig,
    pub iteration: u64,
    pub train_seed: u64,
    pub param_count: usize,
    pub content_hash: String,
}

/// A model snapshot plus the training provenance needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Embedder,
    pub iteration: u64,
    pub train_seed: u64,
}

/// Initializes a fresh model; iteration 0.
pub fn init_model(cfg: EmbedderConfig) -> Result<ModelCheckpoint, EmbedError> {
    ModelCheckpoint::init(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl ModelCheckpoint {
    pub fn init(cfg: EmbedderConfig) -> Result<Self, EmbedError> {
        let train_seed = cfg.seed;
        Ok(Self {
            model: Embedder::new(cfg)?,
            iteration: 0,
            train_seed,
        })
    }

    /// SHA-256 over the config JSON and the little-endian parameter bytes.
    pub fn content_hash(&self) -> String {
        parameter_hash(&self.model)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.model.config().clone(),
            iteration: self.iteration,
            train_seed: self.train_seed,
            param_count: self.model.param_count(),
            content_hash: self.content_hash(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let params = self.model.params();
        let mut bytes = Vec::with_capacity(16 + params.len() * 8);
        bytes.extend_from_slice(WEIGHTS_MAGIC);
        bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let weights = dir.join(WEIGHTS_FILE);
        std::fs::write(&weights, bytes).map_err(io_err(&weights))?;
        let meta = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        std::fs::write(&meta, json).map_err(io_err(&meta))?;
        Ok(())
    }

    pub fn load_meta(dir: &Path) -> Result<CheckpointMeta, CheckpointError> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(format!("meta.json: {e}")))
    }

    /// Loads and verifies the content hash recorded in `meta.json`.
    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let meta = Self::load_meta(dir)?;
        let path = dir.join(WEIGHTS_FILE);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(CheckpointError::Malformed("weights.bin: bad header".into()));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() != 16 + count * 8 || count != meta.param_count {
            return Err(CheckpointError::Malformed(format!(
                "weights.bin: expected {} parameters, file holds {} bytes",
                meta.param_count,
                bytes.len()
            )));
        }
        let params = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let ckpt = Self {
            model: Embedder::from_params(meta.config.clone(), params)?,
            iteration: meta.iteration,
            train_seed: meta.train_seed,
        };
        let actual = ckpt.content_hash();
        if actual != meta.content_hash {
            return Err(CheckpointError::HashMismatch {
                expected: meta.content_hash,
                actual,
            });
        }
        Ok(ckpt)
    }
}

pub fn parameter_hash(model: &Embedder) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(model.config()).expect("config serializes"));
    for p in model.params() {
        hasher.update(p.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}
