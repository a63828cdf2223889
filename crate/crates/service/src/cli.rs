//! Command-line interface. Each command returns a JSON report; `main`
//! prints it and maps errors to exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cxrmetric_core::dataset::{load_manifest, Split};
use cxrmetric_core::embedder::ModelCheckpoint;
use cxrmetric_core::metric::{write_loss_trace, LossKind};
use cxrmetric_core::preprocess::Preprocessor;
use cxrmetric_core::retrieval::{eval_diagnosis, random_baseline_recall, recall_curve, save_index, MIN_BASELINE_TRIALS};
use cxrmetric_core::synthdata::{export, generate_dataset};
use cxrmetric_core::transfer::{
    extract_feature_matrix, fit_classifier, join_cohort, kfold_cv, load_cohort, save_cohort, synth_cohort, Classifier,
    ClassifierKind, FeatureSet, EHR_DIM,
};

use crate::config::AppConfig;
use crate::engine::Engine;
use crate::experiment::{ablate_training, k_sweep, parse_values, train_and_evaluate, AblationParam, ExperimentData, LabeledImages};
use crate::ServiceError;

/// File name of the synthetic cohort written next to the manifest.
pub const COHORT_FILE: &str = "cohort.jsonl";

#[derive(Debug, Parser)]
#[command(name = "cxrmetric", version, about = "Chest radiograph similarity search and diagnosis")]
pub struct Cli {
    /// TOML config file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic radiograph dataset and intervention cohort.
    Synth(SynthArgs),
    /// Train an embedder.
    Train(TrainArgs),
    /// Embed a single image.
    Embed(EmbedArgs),
    /// Build an embedding index over a manifest split.
    Index(IndexArgs),
    /// Retrieve similar cases for one image.
    Query(QueryArgs),
    /// Recall@k of the validation split against the training gallery.
    EvalRetrieval(EvalArgs),
    /// KNN diagnosis metrics of the validation split.
    EvalDiagnosis(EvalArgs),
    /// Cross-validated intervention prediction from image and EHR features.
    EvalTransfer(TransferArgs),
    /// Sweep one parameter and tabulate the metrics.
    Ablate(AblateArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainingFlags {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// ms | infonce
    #[arg(long, default_value = "ms")]
    pub loss: LossKind,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    /// Include the pre-projection feature vector.
    #[arg(long)]
    pub features: bool,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// train | val | test
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Index directory to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ServiceFlags {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub transfer_model: Option<PathBuf>,
    /// Accept an index or transfer model built from another checkpoint.
    #[arg(long)]
    pub no_strict: bool,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub service: ServiceFlags,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Monte Carlo trials for the random baseline.
    #[arg(long, default_value_t = MIN_BASELINE_TRIALS)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Cohort JSON-lines file; defaults to cohort.jsonl beside the manifest.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// logistic | cross_combiner
    #[arg(long)]
    pub classifier: Option<ClassifierKind>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// Write a fused-feature model fitted on the whole cohort here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// attention | loss | k | embed-dim
    #[arg(long)]
    pub param: AblationParam,
    /// `1..30` or a comma list; required for k and embed-dim.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trained checkpoint for the k sweep.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub service: ServiceFlags,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub default_k: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<AppConfig, ServiceError> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn apply_service_flags(cfg: &mut AppConfig, flags: &ServiceFlags) {
    let s = &mut cfg.service;
    if let Some(p) = &flags.checkpoint {
        s.checkpoint = p.clone();
    }
    if let Some(p) = &flags.index {
        s.index = p.clone();
    }
    if let Some(p) = &flags.manifest {
        s.manifest = p.clone();
    }
    if let Some(p) = &flags.transfer_model {
        s.transfer_model = Some(p.clone());
    }
    if flags.no_strict {
        s.strict_hash = false;
    }
}

fn apply_training_flags(cfg: &mut AppConfig, flags: &TrainingFlags) {
    if let Some(n) = flags.iterations {
        cfg.train.iterations = n;
    }
    if let Some(lr) = flags.lr {
        cfg.train.lr = lr;
    }
    if flags.no_attention {
        cfg.model.use_attention = false;
    }
    if let Some(d) = flags.embed_dim {
        cfg.model.embed_dim = d;
    }
    if let Some(n) = flags.samples_per_class {
        cfg.train.samples_per_class = n;
    }
}

fn preprocessor(cfg: &AppConfig) -> Preprocessor {
    Preprocessor::new(cfg.model.input_side).with_crop_pad(cfg.data.crop_pad)
}

fn pick<'a>(flag: &'a Option<PathBuf>, fallback: &'a Path) -> &'a Path {
    flag.as_deref().unwrap_or(fallback)
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, ServiceError> {
    let ckpt = ModelCheckpoint::load(path)?;
    log::info!("loaded checkpoint {} ({})", path.display(), ckpt.content_hash());
    Ok(ckpt)
}

fn write_report(path: &Path, report: &Value) -> Result<(), ServiceError> {
    let text = serde_json::to_string_pretty(report).expect("reports serialize");
    std::fs::write(path, text).map_err(|e| ServiceError::io(path, e))
}

/// Runs one command and returns its JSON report.
pub fn run(cli: &Cli) -> Result<Value, ServiceError> {
    let mut cfg = load_config(cli)?;
    let report = match &cli.command {
        Command::Synth(a) => synth(&mut cfg, a)?,
        Command::Train(a) => {
            apply_training_flags(&mut cfg, &a.training);
            train_cmd(&cfg, a)?
        }
        Command::Embed(a) => embed(&cfg, a)?,
        Command::Index(a) => index(&cfg, a)?,
        Command::Query(a) => {
            apply_service_flags(&mut cfg, &a.service);
            let engine = Engine::open(&cfg.service)?;
            let img = engine.load_image(&a.image)?;
            serde_json::to_value(engine.query(&img, a.k.unwrap_or(cfg.service.default_k))?).expect("serializes")
        }
        Command::EvalRetrieval(a) => eval_retrieval(&cfg, a)?,
        Command::EvalDiagnosis(a) => eval_diag(&cfg, a)?,
        Command::EvalTransfer(a) => eval_transfer(&mut cfg, a)?,
        Command::Ablate(a) => {
            apply_training_flags(&mut cfg, &a.training);
            ablate(&cfg, a)?
        }
        Command::Serve(a) => {
            apply_service_flags(&mut cfg, &a.service);
            if let Some(h) = &a.host {
                cfg.service.host = h.clone();
            }
            if let Some(p) = a.port {
                cfg.service.port = p;
            }
            if let Some(k) = a.default_k {
                cfg.service.default_k = k;
            }
            let engine = Arc::new(Engine::open(&cfg.service)?);
            let runtime = tokio::runtime::Runtime::new().map_err(|e| ServiceError::Internal(e.to_string()))?;
            runtime.block_on(crate::http::serve(engine))?;
            json!({"status": "stopped"})
        }
    };
    if let Some(path) = &cli.report {
        write_report(path, &report)?;
    }
    Ok(report)
}

fn synth(cfg: &mut AppConfig, a: &SynthArgs) -> Result<Value, ServiceError> {
    if let Some(n) = a.per_class {
        cfg.synth.per_class_counts = [n; 3];
    }
    if let Some(s) = a.side {
        cfg.synth.side = s;
    }
    if let Some(f) = a.val_fraction {
        cfg.synth.val_fraction = f;
    }
    let (manifest, records) = generate_dataset(&cfg.synth)?;
    let manifest_path = export(&records, &a.out)?;
    let cohort = synth_cohort(&records, &cfg.cohort);
    let cohort_path = a.out.join(COHORT_FILE);
    save_cohort(&cohort, &cohort_path)?;
    Ok(json!({
        "manifest": manifest_path,
        "cohort": cohort_path,
        "images": records.len(),
        "train": manifest.split_label_counts(Split::Train),
        "val": manifest.split_label_counts(Split::Val),
        "cohort_positives": cohort.iter().filter(|r| r.target).count(),
        "seed": cfg.synth.seed,
    }))
}

fn train_cmd(cfg: &AppConfig, a: &TrainArgs) -> Result<Value, ServiceError> {
    let manifest = load_manifest(pick(&a.manifest, &cfg.service.manifest))?;
    let data = ExperimentData::from_manifest(&manifest, &preprocessor(cfg))?;
    let run = train_and_evaluate(&cfg.model, &cfg.train, a.training.loss, &data, cfg.data.knn_k)?;
    run.checkpoint.save(&a.out)?;
    let trace_path = a.out.join("loss_trace.csv");
    write_loss_trace(&run.trace, &trace_path)?;
    Ok(json!({
        "checkpoint": a.out,
        "model_hash": run.checkpoint.content_hash(),
        "loss": a.training.loss,
        "iterations": cfg.train.iterations,
        "final_loss": run.trace.last().map(|r| r.loss),
        "loss_trace": trace_path,
        "train_seconds": run.train_seconds,
        "validation": run.evaluation,
    }))
}

fn embed(cfg: &AppConfig, a: &EmbedArgs) -> Result<Value, ServiceError> {
    let ckpt = load_checkpoint(pick(&a.checkpoint, &cfg.service.checkpoint))?;
    let model = &ckpt.model;
    let img = Preprocessor::new(model.config().input_side).load_eval(&a.image)?;
    let trace = model.forward(&img, model.default_mask_mode())?;
    let embedding = trace.embedding();
    let mut report = json!({
        "image": a.image,
        "model_hash": ckpt.content_hash(),
        "norm": embedding.norm(),
        "embedding": embedding.as_slice(),
    });
    if a.features {
        report["features"] = json!(trace.features());
    }
    Ok(report)
}

fn index(cfg: &AppConfig, a: &IndexArgs) -> Result<Value, ServiceError> {
    let ckpt = load_checkpoint(pick(&a.checkpoint, &cfg.service.checkpoint))?;
    let manifest = load_manifest(pick(&a.manifest, &cfg.service.manifest))?;
    let split: Split = serde_json::from_value(json!(a.split))
        .map_err(|_| ServiceError::BadRequest(format!("unknown split `{}`", a.split)))?;
    let pre = Preprocessor::new(ckpt.model.config().input_side);
    let idx = LabeledImages::from_manifest(&manifest, split, &pre)?.index(&ckpt.model)?;
    let out = pick(&a.out, &cfg.service.index);
    save_index(&idx, out)?;
    Ok(json!({
        "index": out,
        "count": idx.len(),
        "dim": idx.dim(),
        "model_hash": idx.model_hash(),
        "label_counts": idx.label_counts(),
    }))
}

fn eval_data(cfg: &AppConfig, checkpoint: &Option<PathBuf>, manifest: &Option<PathBuf>) -> Result<(ModelCheckpoint, ExperimentData), ServiceError> {
    let ckpt = load_checkpoint(pick(checkpoint, &cfg.service.checkpoint))?;
    let manifest = load_manifest(pick(manifest, &cfg.service.manifest))?;
    let pre = Preprocessor::new(ckpt.model.config().input_side);
    Ok((ckpt, ExperimentData::from_manifest(&manifest, &pre)?))
}

fn eval_retrieval(cfg: &AppConfig, a: &EvalArgs) -> Result<Value, ServiceError> {
    let k = cfg.service.check_k(a.k.unwrap_or(4))?;
    let (ckpt, data) = eval_data(cfg, &a.checkpoint, &a.manifest)?;
    let gallery = data.train.index(&ckpt.model)?;
    let queries = data.val.index(&ckpt.model)?;
    let curve = recall_curve(&gallery, &queries, k)?;
    let counts = gallery.label_counts();
    let mut baseline = BTreeMap::new();
    for kk in 1..=k {
        baseline.insert(kk, random_baseline_recall(&counts, kk, a.trials, cfg.train.seed)?);
    }
    for r in &curve {
        eprintln!("recall@{:<2} {:.4}  random {:.4}", r.k, r.overall, baseline[&r.k]);
    }
    Ok(json!({
        "k": k,
        "model_hash": ckpt.content_hash(),
        "gallery_size": gallery.len(),
        "queries": queries.len(),
        "recall": curve,
        "recall_at_k": curve.last(),
        "random_baseline": baseline,
        "random_baseline_trials": a.trials,
    }))
}

fn eval_diag(cfg: &AppConfig, a: &EvalArgs) -> Result<Value, ServiceError> {
    let k = cfg.service.check_k(a.k.unwrap_or(cfg.data.knn_k))?;
    let (ckpt, data) = eval_data(cfg, &a.checkpoint, &a.manifest)?;
    let gallery = data.train.index(&ckpt.model)?;
    let queries = data.val.index(&ckpt.model)?;
    let report = eval_diagnosis(&gallery, &queries, k)?;
    eprintln!("{report}");
    Ok(json!({"model_hash": ckpt.content_hash(), "diagnosis": report}))
}

fn eval_transfer(cfg: &mut AppConfig, a: &TransferArgs) -> Result<Value, ServiceError> {
    if let Some(f) = a.folds {
        cfg.transfer.folds = f;
    }
    if let Some(c) = a.classifier {
        cfg.transfer.classifier = c;
    }
    if let Some(l2) = a.l2 {
        cfg.transfer.l2 = l2;
    }
    let ckpt = load_checkpoint(pick(&a.checkpoint, &cfg.service.checkpoint))?;
    let manifest_path = pick(&a.manifest, &cfg.service.manifest).to_path_buf();
    let manifest = load_manifest(&manifest_path)?;
    let cohort_path = match &a.cohort {
        Some(p) => p.clone(),
        None => manifest_path.parent().unwrap_or(Path::new(".")).join(COHORT_FILE),
    };
    let rows = load_cohort(&cohort_path, EHR_DIM)?;
    let pre = Preprocessor::new(ckpt.model.config().input_side);
    let start = Instant::now();
    let (ids, features) = extract_feature_matrix(&ckpt.model, &manifest, &pre)?;
    let samples = join_cohort(&rows, &ids, &features)?;
    let mut sets = BTreeMap::new();
    for set in FeatureSet::ALL {
        let report = kfold_cv(&samples, set, cfg.transfer.folds, cfg.transfer.seed, || Classifier::new(&cfg.transfer))?;
        eprintln!("{:<10} auc {:.4} ± {:.4}", set.as_str(), report.mean_auc, report.sd_auc);
        sets.insert(set.as_str(), report);
    }
    let hash = ckpt.content_hash();
    if let Some(out) = &a.out {
        fit_classifier(&cfg.transfer, &samples, FeatureSet::Fused, hash.clone())?.save(out)?;
    }
    Ok(json!({
        "model_hash": hash,
        "cohort": cohort_path,
        "samples": samples.len(),
        "positives": samples.iter().filter(|s| s.target).count(),
        "classifier": cfg.transfer.classifier,
        "folds": cfg.transfer.folds,
        "seed": cfg.transfer.seed,
        "feature_sets": sets,
        "transfer_model": a.out,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn ablate(cfg: &AppConfig, a: &AblateArgs) -> Result<Value, ServiceError> {
    let values = match &a.values {
        Some(spec) => parse_values(spec).map_err(ServiceError::BadRequest)?,
        None if matches!(a.param, AblationParam::K | AblationParam::EmbedDim) => {
            return Err(ServiceError::BadRequest(format!("--values is required for {}", a.param.as_str())));
        }
        None => Vec::new(),
    };
    let manifest = load_manifest(pick(&a.manifest, &cfg.service.manifest))?;
    let report = match a.param {
        AblationParam::K => {
            for &k in &values {
                crate::config::ServiceConfig::default().check_k(k)?;
            }
            let ckpt = load_checkpoint(pick(&a.checkpoint, &cfg.service.checkpoint))?;
            let pre = Preprocessor::new(ckpt.model.config().input_side);
            k_sweep(&ckpt.model, &ExperimentData::from_manifest(&manifest, &pre)?, &values)?
        }
        param => {
            let data = ExperimentData::from_manifest(&manifest, &preprocessor(cfg))?;
            ablate_training(param, &values, &cfg.model, &cfg.train, a.training.loss, &data, cfg.data.knn_k)?
        }
    };
    eprint!("{report}");
    Ok(serde_json::to_value(report).expect("serializes"))
}
