//! Transfer of frozen image features to tabular intervention prediction:
//! feature extraction, EHR fusion, binary classifiers and cross-validated ROC.

mod cross;
mod cv;
mod fusion;
mod logistic;
mod roc;

pub use cross::{CrossCombiner, CrossConfig};
pub use cv::{kfold_cv, stratified_folds, CvReport, FoldResult};
pub use fusion::{ColumnStats, FeatureSet, FusionModel};
pub use logistic::LogisticRegression;
pub use roc::{roc_auc, RocCurve, RocPoint};

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassLabel, DatasetManifest};
use crate::embedder::{EmbedError, Embedder};
use crate::preprocess::{ImageBuffer, PreprocessError, Preprocessor};
use crate::synthdata::{SynthRecord, ICU_SEVERITY};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("only one class present")]
    SingleClass,
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("design matrix is singular")]
    SingularFit,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cohort schema error: {0}")]
    Schema(String),
    #[error("cohort row references unknown image `{0}`")]
    UnknownImage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

fn io_err(path: &Path, source: std::io::Error) -> TransferError {
    TransferError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Column names of the synthetic cohort's EHR vector.
pub const EHR_SCHEMA: [&str; 17] = [
    "age",
    "sex_male",
    "spo2",
    "heart_rate",
    "resp_rate",
    "temperature",
    "systolic_bp",
    "diastolic_bp",
    "wbc",
    "lymphocytes",
    "crp",
    "d_dimer",
    "ferritin",
    "ldh",
    "creatinine",
    "platelets",
    "procalcitonin",
];

pub const EHR_DIM: usize = EHR_SCHEMA.len();

/// One image's features joined with its EHR row and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSample {
    pub image_id: String,
    pub image_features: Vec<f64>,
    /// `None` marks a missing value, imputed inside the fusion step.
    pub ehr: Vec<Option<f64>>,
    /// Any intervention within 72 hours.
    pub target: bool,
}

impl TransferSample {
    pub fn check_finite(&self) -> Result<(), TransferError> {
        if self.image_features.iter().any(|v| !v.is_finite()) {
            return Err(TransferError::NonFinite(format!("image features of `{}`", self.image_id)));
        }
        if self.ehr.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TransferError::NonFinite(format!("EHR row of `{}`", self.image_id)));
        }
        Ok(())
    }
}

pub trait BinaryClassifier {
    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<(), TransferError>;
    /// Probability of the positive class, in [0, 1].
    fn score(&self, x: &[f64]) -> f64;
}

/// One line of the cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub image_id: String,
    pub ehr: Vec<Option<f64>>,
    pub target: bool,
}

pub fn load_cohort(path: &Path, expected_dim: usize) -> Result<Vec<CohortRow>, TransferError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CohortRow = serde_json::from_str(&line)
            .map_err(|e| TransferError::Schema(format!("line {}: {e}", n + 1)))?;
        if row.ehr.len() != expected_dim {
            return Err(TransferError::Schema(format!(
                "line {}: {} EHR values, schema has {expected_dim}",
                n + 1,
                row.ehr.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_cohort(rows: &[CohortRow], path: &Path) -> Result<(), TransferError> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("cohort rows serialize");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&out).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub seed: u64,
    /// Probability that the severity-derived target is flipped.
    pub label_noise: f64,
    /// Per-value probability of a missing EHR entry.
    pub missing_rate: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            label_noise: 0.05,
            missing_rate: 0.05,
        }
    }
}

/// Planted-signal cohort: the target is `severity > ICU_SEVERITY` flipped
/// with probability `label_noise`. The EHR columns are noisy functions of
/// severity and class, so both feature blocks carry part of the signal.
pub fn synth_cohort(records: &[SynthRecord], cfg: &CohortConfig) -> Vec<CohortRow> {
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let target = (rec.severity > ICU_SEVERITY) ^ rng.gen_bool(cfg.label_noise);
            let mut ehr: Vec<Option<f64>> = synth_ehr(rec, &mut rng).into_iter().map(Some).collect();
            for v in &mut ehr {
                if rng.gen_bool(cfg.missing_rate) {
                    *v = None;
                }
            }
            CohortRow {
                image_id: rec.id().to_string(),
                ehr,
                target,
            }
        })
        .collect()
}

fn synth_ehr(rec: &SynthRecord, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = rec.severity;
    let mut n = |mean: f64, sd: f64| Normal::new(mean, sd).expect("positive sd").sample(rng);
    let clinical = rec.meta.clinical.as_ref();
    let age = clinical.map_or(50.0, |c| c.age);
    let male = clinical.map_or(0.0, |c| f64::from(u8::from(c.sex == crate::dataset::Sex::M)));
    let spo2 = clinical.and_then(|c| c.spo2).unwrap_or(97.0);
    let wbc = clinical.and_then(|c| c.wbc).unwrap_or(7.0);
    let (crp_base, pct_base) = match rec.label() {
        ClassLabel::Control => (3.0, 0.05),
        ClassLabel::NonCovidPneumonia => (60.0, 0.8),
        ClassLabel::Covid19 => (40.0, 0.2),
    };
    let values = vec![
        age,
        male,
        spo2,
        n(78.0 + 25.0 * s, 9.0),
        n(15.0 + 10.0 * s, 3.5),
        n(36.8 + 1.2 * s, 0.5),
        n(125.0 - 15.0 * s, 14.0),
        n(78.0 - 8.0 * s, 9.0),
        wbc,
        n(1.8 - 0.9 * s, 0.45).max(0.1),
        (crp_base + 80.0 * s + n(0.0, 35.0)).max(0.5),
        (0.4 + 1.5 * s + n(0.0, 0.8)).max(0.05),
        (250.0 + 600.0 * s + n(0.0, 300.0)).max(10.0),
        (190.0 + 200.0 * s + n(0.0, 80.0)).max(80.0),
        n(0.9 + 0.2 * s, 0.25).max(0.3),
        n(250.0 - 40.0 * s, 60.0).max(20.0),
        (pct_base * (1.0 + s) + n(0.0, 0.3)).max(0.01),
    ];
    debug_assert_eq!(values.len(), EHR_DIM);
    values
}

/// Pre-projection features for in-memory images, eval mode, no augmentation.
pub fn extract_features(model: &Embedder, images: &[ImageBuffer]) -> Result<Vec<Vec<f64>>, TransferError> {
    images
        .iter()
        .map(|img| model.features(img).map_err(TransferError::from))
        .collect()
}

/// Returns `(ids, rows)` for every manifest record, in manifest order.
pub fn extract_feature_matrix(
    model: &Embedder,
    manifest: &DatasetManifest,
    pre: &Preprocessor,
) -> Result<(Vec<String>, Vec<Vec<f64>>), TransferError> {
    let mut ids = Vec::with_capacity(manifest.images.len());
    let mut rows = Vec::with_capacity(manifest.images.len());
    let dim = model.config().feature_dim;
    for rec in &manifest.images {
        let img = pre.load_eval(&manifest.resolve(rec))?;
        let row = model.features(&img)?;
        if row.len() != dim {
            return Err(TransferError::ShapeMismatch(format!(
                "`{}` gave {} features, expected {dim}",
                rec.id,
                row.len()
            )));
        }
        ids.push(rec.id.clone());
        rows.push(row);
    }
    Ok((ids, rows))
}

/// Joins cohort rows to extracted features by image id.
pub fn join_cohort(
    rows: &[CohortRow],
    ids: &[String],
    features: &[Vec<f64>],
) -> Result<Vec<TransferSample>, TransferError> {
    if ids.len() != features.len() {
        return Err(TransferError::ShapeMismatch(format!(
            "{} ids for {} feature rows",
            ids.len(),
            features.len()
        )));
    }
    let by_id: HashMap<&str, &Vec<f64>> = ids.iter().map(String::as_str).zip(features).collect();
    rows.iter()
        .map(|row| {
            let f = by_id
                .get(row.image_id.as_str())
                .ok_or_else(|| TransferError::UnknownImage(row.image_id.clone()))?;
            Ok(TransferSample {
                image_id: row.image_id.clone(),
                image_features: (*f).clone(),
                ehr: row.ehr.clone(),
                target: row.target,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    #[default]
    Logistic,
    CrossCombiner,
}

impl std::str::FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logistic" => Ok(Self::Logistic),
            "cross_combiner" | "cross-combiner" => Ok(Self::CrossCombiner),
            other => Err(format!("unknown classifier `{other}` (expected logistic or cross_combiner)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub classifier: ClassifierKind,
    pub l2: f64,
    pub folds: usize,
    pub seed: u64,
    pub cross: CrossConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierKind::Logistic,
            l2: 1.0,
            folds: 5,
            seed: 0,
            cross: CrossConfig::default(),
        }
    }
}

/// A fitted classifier of either kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    Logistic(LogisticRegression),
    CrossCombiner(CrossCombiner),
}

impl Classifier {
    pub fn new(cfg: &TransferConfig) -> Self {
        match cfg.classifier {
            ClassifierKind::Logistic => Classifier::Logistic(LogisticRegression::new(cfg.l2)),
            ClassifierKind::CrossCombiner => Classifier::CrossCombiner(CrossCombiner::new(CrossConfig {
                seed: cfg.seed,
                ..cfg.cross.clone()
            })),
        }
    }
}

impl BinaryClassifier for Classifier {
    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<(), TransferError> {
        match self {
            Classifier::Logistic(c) => c.fit(x, y),
            Classifier::CrossCombiner(c) => c.fit(x, y),
        }
    }

    fn score(&self, x: &[f64]) -> f64 {
        match self {
            Classifier::Logistic(c) => c.score(x),
            Classifier::CrossCombiner(c) => c.score(x),
        }
    }
}

/// Fusion statistics plus classifier, fitted on one sample set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferModel {
    pub fusion: FusionModel,
    pub classifier: Classifier,
    /// Hash of the embedder whose features were used for fitting.
    pub model_hash: String,
}

impl TransferModel {
    pub fn predict(&self, image_features: &[f64], ehr: &[Option<f64>]) -> Result<f64, TransferError> {
        let row = self.fusion.fuse(image_features, ehr)?;
        Ok(self.classifier.score(&row))
    }

    pub fn save(&self, path: &Path) -> Result<(), TransferError> {
        let text = serde_json::to_string(self).expect("transfer model serializes");
        fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TransferError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| TransferError::Schema(format!("{}: {e}", path.display())))
    }
}

/// Fits fusion statistics and a classifier on all of `samples`.
pub fn fit_classifier(
    cfg: &TransferConfig,
    samples: &[TransferSample],
    set: FeatureSet,
    model_hash: impl Into<String>,
) -> Result<TransferModel, TransferError> {
    let refs: Vec<&TransferSample> = samples.iter().collect();
    let fusion = FusionModel::fit(&refs, set)?;
    let x = samples
        .iter()
        .map(|s| fusion.transform(s))
        .collect::<Result<Vec<_>, _>>()?;
    let y: Vec<bool> = samples.iter().map(|s| s.target).collect();
    if y.iter().all(|&t| t) || y.iter().all(|&t| !t) {
        return Err(TransferError::SingleClass);
    }
    let mut classifier = Classifier::new(cfg);
    classifier.fit(&x, &y)?;
    Ok(TransferModel {
        fusion,
        classifier,
        model_hash: model_hash.into(),
    })
}
