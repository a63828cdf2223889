#![allow(dead_code)]

use std::path::PathBuf;

use cxrmetric_core::dataset::{load_manifest, DatasetManifest, Split};
use cxrmetric_core::embedder::{EmbedderConfig, ModelCheckpoint};
use cxrmetric_core::preprocess::Preprocessor;
use cxrmetric_core::retrieval::save_index;
use cxrmetric_core::synthdata::{export, generate_dataset, SynthConfig};
use cxrmetric_core::transfer::{
    extract_feature_matrix, fit_classifier, join_cohort, synth_cohort, CohortConfig, FeatureSet, TransferConfig,
};
use cxrmetric_service::config::ServiceConfig;
use cxrmetric_service::experiment::LabeledImages;

pub const SIDE: usize = 64;

pub fn small_model() -> EmbedderConfig {
    EmbedderConfig {
        input_side: SIDE,
        stage2_grid: SIDE / 16,
        stage1_channels: 8,
        stage2_channels: 8,
        feature_dim: 16,
        head_hidden: 16,
        embed_dim: 32,
        se_reduction: 2,
        ..EmbedderConfig::default()
    }
}

/// Exported dataset, untrained checkpoint, train-split index and a fused
/// transfer model, all under one temp dir.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest: DatasetManifest,
    pub checkpoint: ModelCheckpoint,
    pub config: ServiceConfig,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (_, records) = generate_dataset(&SynthConfig {
            per_class_counts: [8; 3],
            side: SIDE,
            seed: 9,
            ..SynthConfig::default()
        })
        .unwrap();
        let manifest_path = export(&records, &dir.path().join("data")).unwrap();
        let manifest = load_manifest(&manifest_path).unwrap();

        let checkpoint = ModelCheckpoint::init(small_model()).unwrap();
        let ckpt_dir = dir.path().join("ckpt");
        checkpoint.save(&ckpt_dir).unwrap();

        let pre = Preprocessor::new(SIDE);
        let index = LabeledImages::from_manifest(&manifest, Split::Train, &pre)
            .unwrap()
            .index(&checkpoint.model)
            .unwrap();
        let index_dir = dir.path().join("index");
        save_index(&index, &index_dir).unwrap();

        let (ids, features) = extract_feature_matrix(&checkpoint.model, &manifest, &pre).unwrap();
        let rows = synth_cohort(&records, &CohortConfig::default());
        let samples = join_cohort(&rows, &ids, &features).unwrap();
        let transfer_path = dir.path().join("transfer.json");
        fit_classifier(&TransferConfig::default(), &samples, FeatureSet::Fused, checkpoint.content_hash())
            .unwrap()
            .save(&transfer_path)
            .unwrap();

        let config = ServiceConfig {
            checkpoint: ckpt_dir,
            index: index_dir,
            manifest: manifest_path,
            transfer_model: Some(transfer_path),
            ..ServiceConfig::default()
        };
        Self {
            dir,
            manifest,
            checkpoint,
            config,
        }
    }

    pub fn train_ids(&self) -> Vec<String> {
        self.manifest.split(Split::Train).map(|r| r.id.clone()).collect()
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.manifest.resolve(self.manifest.get(id).unwrap())
    }
}
