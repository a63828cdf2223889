//! The query pipeline shared by the CLI and the HTTP API: preprocess, embed,
//! exact top-k, distance-weighted vote, attention overlay.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cxrmetric_core::dataset::{load_manifest, ClassLabel, ClinicalRecord, DatasetManifest};
use cxrmetric_core::embedder::{AttentionMask, ModelCheckpoint};
use cxrmetric_core::preprocess::{decode_image, ImageBuffer, Preprocessor};
use cxrmetric_core::retrieval::{knn_classify, load_index, EmbeddingIndex};
use cxrmetric_core::transfer::TransferModel;

use crate::config::ServiceConfig;
use crate::overlay::render_attention_overlay;
use crate::ServiceError;

/// Overlay cache entries kept before the cache is cleared.
const OVERLAY_CACHE_LIMIT: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub id: String,
    pub label: ClassLabel,
    pub similarity: f64,
    pub clinical: Option<ClinicalRecord>,
    pub thumbnail_url: String,
    pub overlay_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub predicted_label: ClassLabel,
    pub class_scores: BTreeMap<ClassLabel, f64>,
    pub results: Vec<QueryHit>,
    pub query_overlay_url: String,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub index_size: usize,
    pub model_hash: String,
    pub default_k: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub transfer_model: bool,
}

/// Immutable snapshot of checkpoint, index and manifest.
pub struct Engine {
    checkpoint: ModelCheckpoint,
    model_hash: String,
    index: EmbeddingIndex,
    manifest: DatasetManifest,
    pre: Preprocessor,
    transfer: Option<TransferModel>,
    config: ServiceConfig,
    overlays: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

impl Engine {
    pub fn open(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let checkpoint = ModelCheckpoint::load(&cfg.checkpoint)?;
        let hash = checkpoint.content_hash();
        let index = load_index(&cfg.index, cfg.strict_hash.then_some(hash.as_str()))?;
        let manifest = load_manifest(&cfg.manifest)?;
        let transfer = cfg.transfer_model.as_deref().map(TransferModel::load).transpose()?;
        Self::from_parts(checkpoint, index, manifest, transfer, cfg.clone())
    }

    pub fn from_parts(
        checkpoint: ModelCheckpoint,
        index: EmbeddingIndex,
        manifest: DatasetManifest,
        transfer: Option<TransferModel>,
        config: ServiceConfig,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        let model_hash = checkpoint.content_hash();
        if index.model_hash() != model_hash {
            if config.strict_hash {
                return Err(ServiceError::HashMismatch {
                    expected: model_hash,
                    found: index.model_hash().to_string(),
                });
            }
            log::warn!("index was built with model {}, serving {model_hash}", index.model_hash());
        }
        let cfg = checkpoint.model.config();
        if index.dim() != cfg.embed_dim {
            return Err(ServiceError::Config(format!(
                "index dimension {} does not match the model's {}",
                index.dim(),
                cfg.embed_dim
            )));
        }
        if let Some(id) = index.ids().iter().find(|id| manifest.get(id).is_none()) {
            return Err(ServiceError::Config(format!("index id `{id}` is not in the manifest")));
        }
        let pre = Preprocessor::new(cfg.input_side);
        Ok(Self {
            checkpoint,
            model_hash,
            index,
            manifest,
            pre,
            transfer,
            config,
            overlays: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            index_size: self.index.len(),
            model_hash: self.model_hash.clone(),
            default_k: self.config.default_k,
            k_min: self.config.k_min,
            k_max: self.config.k_max,
            transfer_model: self.transfer.is_some(),
        }
    }

    /// Decodes an uploaded PNG/JPEG into a model-ready image.
    pub fn prepare_upload(&self, bytes: &[u8]) -> Result<ImageBuffer, ServiceError> {
        let raw = decode_image(bytes).map_err(|e| ServiceError::BadRequest(format!("image: {e}")))?;
        self.pre
            .prepare_eval(&raw)
            .map_err(|e| ServiceError::BadRequest(format!("image: {e}")))
    }

    pub fn load_image(&self, path: &std::path::Path) -> Result<ImageBuffer, ServiceError> {
        Ok(self.pre.load_eval(path)?)
    }

    pub fn gallery_image(&self, id: &str) -> Result<ImageBuffer, ServiceError> {
        let rec = self
            .manifest
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("image `{id}`")))?;
        Ok(self.pre.load_eval(&self.manifest.resolve(rec))?)
    }

    pub fn image_png(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        Ok(self.gallery_image(id)?.to_png_bytes()?)
    }

    fn attention(&self, image: &ImageBuffer) -> Result<AttentionMask, ServiceError> {
        let model = &self.checkpoint.model;
        if model.config().use_attention {
            Ok(model.attention_map(image)?)
        } else {
            Ok(AttentionMask::ones(model.config().stage2_grid))
        }
    }

    fn cache_overlay(&self, key: String, image: &ImageBuffer) -> Result<Arc<Vec<u8>>, ServiceError> {
        if let Some(hit) = self.overlays.lock().expect("overlay cache").get(&key) {
            return Ok(hit.clone());
        }
        // Computed outside the lock; a racing duplicate just overwrites an equal value.
        let png = Arc::new(render_attention_overlay(image, &self.attention(image)?)?);
        let mut cache = self.overlays.lock().expect("overlay cache");
        if cache.len() >= OVERLAY_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, png.clone());
        Ok(png)
    }

    /// Overlay of a gallery image or of a previous query.
    pub fn overlay_png(&self, id: &str) -> Result<Arc<Vec<u8>>, ServiceError> {
        if let Some(hit) = self.overlays.lock().expect("overlay cache").get(id) {
            return Ok(hit.clone());
        }
        if self.manifest.get(id).is_none() {
            return Err(ServiceError::NotFound(format!("overlay `{id}`")));
        }
        let img = self.gallery_image(id)?;
        self.cache_overlay(id.to_string(), &img)
    }

    /// Runs the full query pipeline on a model-ready image.
    pub fn query(&self, image: &ImageBuffer, k: usize) -> Result<QueryResponse, ServiceError> {
        let start = Instant::now();
        let k = self.config.check_k(k)?;
        let model = &self.checkpoint.model;
        let embedding = model.embed(image)?;
        let mut result = self.index.query_topk(&embedding, k)?;
        result.attach_clinical(&self.manifest);
        let (predicted_label, scores) = knn_classify(&result)?;

        let mut digest = Sha256::new();
        for p in &image.pixels {
            digest.update(p.to_le_bytes());
        }
        let query_id = format!("query-{}", &hex::encode(digest.finalize())[..16]);
        self.cache_overlay(query_id.clone(), image)?;

        let results = result
            .entries
            .into_iter()
            .map(|e| QueryHit {
                thumbnail_url: format!("/api/images/{}", e.id),
                overlay_url: format!("/api/overlays/{}", e.id),
                id: e.id,
                label: e.label,
                similarity: e.similarity,
                clinical: e.clinical,
            })
            .collect();
        Ok(QueryResponse {
            predicted_label,
            class_scores: ClassLabel::ALL.iter().map(|&c| (c, scores[c.index()])).collect(),
            results,
            query_overlay_url: format!("/api/overlays/{query_id}"),
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn query_bytes(&self, bytes: &[u8], k: usize) -> Result<QueryResponse, ServiceError> {
        let img = self.prepare_upload(bytes)?;
        self.query(&img, k)
    }

    /// `image` is a gallery id or a base64-encoded PNG/JPEG.
    pub fn predict_intervention(&self, image: &str, ehr: &[Option<f64>]) -> Result<f64, ServiceError> {
        let transfer = self
            .transfer
            .as_ref()
            .ok_or_else(|| ServiceError::NotFound("no transfer model is loaded".into()))?;
        if self.config.strict_hash && transfer.model_hash != self.model_hash {
            return Err(ServiceError::HashMismatch {
                expected: self.model_hash.clone(),
                found: transfer.model_hash.clone(),
            });
        }
        let img = if self.manifest.get(image).is_some() {
            self.gallery_image(image)?
        } else {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(image.trim())
                .map_err(|_| ServiceError::BadRequest("`image` is neither a known id nor base64".into()))?;
            self.prepare_upload(&bytes)?
        };
        let expected = transfer.fusion.ehr.len();
        if transfer.fusion.set != cxrmetric_core::transfer::FeatureSet::ImageOnly && ehr.len() != expected {
            return Err(ServiceError::BadRequest(format!("expected {expected} EHR values, got {}", ehr.len())));
        }
        if ehr.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ServiceError::BadRequest("EHR values must be finite".into()));
        }
        let features = self.checkpoint.model.features(&img)?;
        Ok(transfer.predict(&features, ehr).map_err(|e| ServiceError::BadRequest(e.to_string()))?)
    }
}
