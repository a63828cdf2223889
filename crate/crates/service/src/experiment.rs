//! Train-and-evaluate runs and the ablation harness used by `ablate`.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use cxrmetric_core::dataset::{ClassLabel, DatasetManifest, Split};
use cxrmetric_core::embedder::{parameter_hash, Embedder, EmbedderConfig, ModelCheckpoint};
use cxrmetric_core::metric::{train, LossConfig, LossKind, LossRecord, TrainingSet};
use cxrmetric_core::preprocess::{ImageBuffer, Preprocessor};
use cxrmetric_core::retrieval::{build_index, eval_diagnosis, recall_curve, DiagnosisReport, EmbeddingIndex, RecallReport};
use cxrmetric_core::synthdata::SynthRecord;

use crate::ServiceError;

/// Model-ready images of one split.
#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub ids: Vec<String>,
    pub labels: Vec<ClassLabel>,
    pub images: Vec<ImageBuffer>,
}

impl LabeledImages {
    pub fn from_manifest(manifest: &DatasetManifest, split: Split, pre: &Preprocessor) -> Result<Self, ServiceError> {
        let mut out = Self::default();
        for rec in manifest.split(split) {
            out.images.push(pre.load_eval(&manifest.resolve(rec))?);
            out.ids.push(rec.id.clone());
            out.labels.push(rec.label);
        }
        Ok(out)
    }

    pub fn from_records(records: &[SynthRecord], split: Split, pre: &Preprocessor) -> Result<Self, ServiceError> {
        let mut out = Self::default();
        for rec in records.iter().filter(|r| r.meta.split == split) {
            out.images.push(pre.prepare_eval(&rec.image)?);
            out.ids.push(rec.meta.id.clone());
            out.labels.push(rec.meta.label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index(&self, model: &Embedder) -> Result<EmbeddingIndex, ServiceError> {
        let embeddings = self
            .images
            .iter()
            .map(|img| model.embed(img))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(build_index(embeddings, self.ids.clone(), self.labels.clone(), parameter_hash(model))?)
    }
}

/// Train split as gallery, validation split as queries.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: LabeledImages,
    pub val: LabeledImages,
    pub crop_pad: usize,
}

impl ExperimentData {
    pub fn from_manifest(manifest: &DatasetManifest, pre: &Preprocessor) -> Result<Self, ServiceError> {
        Ok(Self {
            train: LabeledImages::from_manifest(manifest, Split::Train, pre)?,
            val: LabeledImages::from_manifest(manifest, Split::Val, pre)?,
            crop_pad: pre.crop_pad,
        })
    }

    pub fn from_records(records: &[SynthRecord], pre: &Preprocessor) -> Result<Self, ServiceError> {
        Ok(Self {
            train: LabeledImages::from_records(records, Split::Train, pre)?,
            val: LabeledImages::from_records(records, Split::Val, pre)?,
            crop_pad: pre.crop_pad,
        })
    }

    fn training_set(&self) -> TrainingSet {
        TrainingSet::new(self.train.images.clone(), self.train.labels.clone(), self.crop_pad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Recall at k = 1..=max_k.
    pub recall: Vec<RecallReport>,
    pub diagnosis: DiagnosisReport,
}

impl Evaluation {
    pub fn recall_at(&self, k: usize) -> Option<&RecallReport> {
        self.recall.get(k.checked_sub(1)?)
    }
}

pub fn evaluate(model: &Embedder, data: &ExperimentData, max_k: usize, knn_k: usize) -> Result<Evaluation, ServiceError> {
    let gallery = data.train.index(model)?;
    let queries = data.val.index(model)?;
    Ok(Evaluation {
        recall: recall_curve(&gallery, &queries, max_k)?,
        diagnosis: eval_diagnosis(&gallery, &queries, knn_k)?,
    })
}

pub struct RunResult {
    pub checkpoint: ModelCheckpoint,
    pub trace: Vec<LossRecord>,
    pub evaluation: Evaluation,
    pub train_seconds: f64,
}

/// Initializes from `model_cfg`, trains with `loss_cfg` and evaluates on the
/// validation split.
pub fn train_and_evaluate(
    model_cfg: &EmbedderConfig,
    loss_cfg: &LossConfig,
    kind: LossKind,
    data: &ExperimentData,
    knn_k: usize,
) -> Result<RunResult, ServiceError> {
    let init = ModelCheckpoint::init(model_cfg.clone())?;
    let start = Instant::now();
    let outcome = train(&init, &data.training_set(), loss_cfg, kind)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let evaluation = evaluate(&outcome.checkpoint.model, data, 4.max(knn_k), knn_k)?;
    Ok(RunResult {
        checkpoint: outcome.checkpoint,
        trace: outcome.trace,
        evaluation,
        train_seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationParam {
    Attention,
    Loss,
    K,
    EmbedDim,
}

impl AblationParam {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationParam::Attention => "attention",
            AblationParam::Loss => "loss",
            AblationParam::K => "k",
            AblationParam::EmbedDim => "embed-dim",
        }
    }
}

impl std::str::FromStr for AblationParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(Self::Attention),
            "loss" => Ok(Self::Loss),
            "k" => Ok(Self::K),
            "embed-dim" | "embed_dim" => Ok(Self::EmbedDim),
            other => Err(format!("unknown ablation parameter `{other}` (attention|loss|k|embed-dim)")),
        }
    }
}

/// Parses `1..30` (inclusive) or `32,64,128`.
pub fn parse_values(spec: &str) -> Result<Vec<usize>, String> {
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    let values = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty range {spec}"));
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(parse).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() {
        return Err("no values given".into());
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub param: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, value: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value == value)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let keys: Vec<&String> = self.rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
        write!(f, "{:>12}", self.param)?;
        for k in &keys {
            write!(f, " {k:>14}")?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "{:>12}", row.value)?;
            for k in &keys {
                match row.metrics.get(*k) {
                    Some(v) => write!(f, " {v:>14.4}")?,
                    None => write!(f, " {:>14}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Recall@1, recall@4, diagnosis accuracy and training time of one run.
pub fn run_metrics(run: &RunResult) -> BTreeMap<String, f64> {
    let e = &run.evaluation;
    let mut m = BTreeMap::new();
    m.insert("accuracy".to_string(), e.diagnosis.accuracy);
    for k in [1, 4] {
        if let Some(r) = e.recall_at(k) {
            m.insert(format!("recall@{k}"), r.overall);
        }
    }
    m.insert("final_loss".to_string(), run.trace.last().map_or(f64::NAN, |r| r.loss));
    m.insert("train_seconds".to_string(), run.train_seconds);
    m
}

pub fn report_from_runs<'a>(param: AblationParam, runs: impl IntoIterator<Item = (String, &'a RunResult)>) -> AblationReport {
    AblationReport {
        param: param.as_str().to_string(),
        rows: runs
            .into_iter()
            .map(|(value, run)| AblationRow {
                value,
                metrics: run_metrics(run),
            })
            .collect(),
    }
}

/// Recall@k and KNN accuracy at every k of a fixed model.
pub fn k_sweep(model: &Embedder, data: &ExperimentData, values: &[usize]) -> Result<AblationReport, ServiceError> {
    let max_k = *values.iter().max().ok_or_else(|| ServiceError::BadRequest("no k values".into()))?;
    if values.contains(&0) {
        return Err(ServiceError::BadRequest("k must be at least 1".into()));
    }
    let gallery = data.train.index(model)?;
    let queries = data.val.index(model)?;
    let curve = recall_curve(&gallery, &queries, max_k)?;
    let rows = values
        .iter()
        .map(|&k| {
            let diag = eval_diagnosis(&gallery, &queries, k)?;
            let mut metrics = BTreeMap::new();
            metrics.insert("accuracy".to_string(), diag.accuracy);
            metrics.insert("recall@k".to_string(), curve[k - 1].overall);
            Ok(AblationRow {
                value: k.to_string(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>, ServiceError>>()?;
    Ok(AblationReport {
        param: AblationParam::K.as_str().to_string(),
        rows,
    })
}

/// Trains one model per setting and reports each.
pub fn ablate_training(
    param: AblationParam,
    values: &[usize],
    model_cfg: &EmbedderConfig,
    loss_cfg: &LossConfig,
    kind: LossKind,
    data: &ExperimentData,
    knn_k: usize,
) -> Result<AblationReport, ServiceError> {
    let settings: Vec<(String, EmbedderConfig, LossKind)> = match param {
        AblationParam::Attention => vec![
            ("on".into(), EmbedderConfig { use_attention: true, ..model_cfg.clone() }, kind),
            ("off".into(), EmbedderConfig { use_attention: false, ..model_cfg.clone() }, kind),
        ],
        AblationParam::Loss => vec![
            ("ms".into(), model_cfg.clone(), LossKind::Ms),
            ("infonce".into(), model_cfg.clone(), LossKind::InfoNce),
        ],
        AblationParam::EmbedDim => values
            .iter()
            .map(|&d| (d.to_string(), EmbedderConfig { embed_dim: d, ..model_cfg.clone() }, kind))
            .collect(),
        AblationParam::K => return Err(ServiceError::BadRequest("the k sweep needs a trained model, not training".into())),
    };
    let mut runs = Vec::with_capacity(settings.len());
    for (value, cfg, kind) in settings {
        cfg.validate()?;
        log::info!("ablate {}: training `{value}`", param.as_str());
        runs.push((value, train_and_evaluate(&cfg, loss_cfg, kind, data, knn_k)?));
    }
    Ok(report_from_runs(param, runs.iter().map(|(v, r)| (v.clone(), r))))
}
