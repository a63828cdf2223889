use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    infonce_loss_grad, mine_pairs, ms_loss_grad, sample_batch, similarity_matrix, LossConfig, LossKind, MetricError,
    MinedPairs, SimilarityMatrix,
};
use crate::dataset::{ClassLabel, DatasetManifest, Split};
use crate::embedder::ModelCheckpoint;
use crate::embedder::Embedder;
use crate::preprocess::{train_crop, ImageBuffer, Preprocessor};

/// Eval-preprocessed training images held in memory; the random crop is
/// applied per draw.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<ClassLabel>,
    pub crop_pad: usize,
}

impl TrainingSet {
    pub fn new(images: Vec<ImageBuffer>, labels: Vec<ClassLabel>, crop_pad: usize) -> Self {
        assert_eq!(images.len(), labels.len());
        Self {
            images,
            labels,
            crop_pad,
        }
    }

    /// Loads and preprocesses the train split of `manifest`.
    pub fn from_manifest(manifest: &DatasetManifest, pre: &Preprocessor) -> Result<Self, MetricError> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for rec in manifest.split(Split::Train) {
            images.push(pre.load_eval(&manifest.resolve(rec))?);
            labels.push(rec.label);
        }
        Ok(Self::new(images, labels, pre.crop_pad))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Loss of one batch together with its parameter gradient.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub similarity: SimilarityMatrix,
    /// The pairs the multi-similarity loss used; `None` for InfoNCE.
    pub mined: Option<MinedPairs>,
}

/// Embeds `images`, evaluates the selected loss and backpropagates it to the
/// parameters. `fixed_mined` overrides mining (used by gradient checks, where
/// the mined sets must not change under perturbation).
pub fn batch_objective(
    model: &Embedder,
    images: &[ImageBuffer],
    labels: &[ClassLabel],
    cfg: &LossConfig,
    kind: LossKind,
    fixed_mined: Option<&MinedPairs>,
) -> Result<BatchObjective, MetricError> {
    let mode = model.default_mask_mode();
    let traces = images
        .iter()
        .map(|img| model.forward(img, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let embeddings: Vec<Vec<f64>> = traces.iter().map(|t| t.embedding().0).collect();
    let s = similarity_matrix(&embeddings, labels)?;
    let (loss, d_s, mined) = match kind {
        LossKind::Ms => {
            let mined = match fixed_mined {
                Some(m) => m.clone(),
                None => mine_pairs(&s, cfg.epsilon_mine)?,
            };
            let (loss, g) = ms_loss_grad(&s, &mined, cfg);
            (loss, g, Some(mined))
        }
        LossKind::InfoNce => {
            let (loss, g) = infonce_loss_grad(&s, cfg.temperature)?;
            (loss, g, None)
        }
    };

    // S_ij = <e_i, e_j>, so dL/de_i = sum_j (G_ij + G_ji) e_j.
    let m = images.len();
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut grads = vec![0.0; model.param_count()];
    for i in 0..m {
        let mut d_e = vec![0.0; dim];
        for j in 0..m {
            let w = d_s[i * m + j] + d_s[j * m + i];
            if w != 0.0 {
                for (d, e) in d_e.iter_mut().zip(&embeddings[j]) {
                    *d += w * e;
                }
            }
        }
        model.backward(&traces[i], &d_e, &mut grads);
    }
    Ok(BatchObjective {
        loss,
        grads,
        similarity: s,
        mined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub kind: LossKind,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub trace: Vec<LossRecord>,
}

/// Runs `cfg.iterations` Adam steps of sample, crop, embed, mine and loss.
/// Batch composition and crops come from separate streams of `cfg.seed`.
pub fn train(
    init: &ModelCheckpoint,
    set: &TrainingSet,
    cfg: &LossConfig,
    kind: LossKind,
) -> Result<TrainOutcome, MetricError> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            checkpoint: init.clone(),
            trace: Vec::new(),
        });
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(0);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    crop_rng.set_stream(1);

    let mut model = init.model.clone();
    let mut adam = Adam::new(model.param_count(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let batch = sample_batch(&set.labels, cfg.classes_per_batch, cfg.samples_per_class, &mut sample_rng)?;
        let images: Vec<ImageBuffer> = batch
            .iter()
            .map(|&i| train_crop(&set.images[i], set.crop_pad, &mut crop_rng))
            .collect();
        let labels: Vec<ClassLabel> = batch.iter().map(|&i| set.labels[i]).collect();
        let obj = batch_objective(&model, &images, &labels, cfg, kind, None)?;
        if !obj.loss.is_finite() || obj.grads.iter().any(|g| !g.is_finite()) {
            return Err(MetricError::NonFiniteLoss {
                iteration,
                loss: obj.loss,
            });
        }
        adam.step(model.params_mut(), &obj.grads);
        if iteration % 50 == 0 || iteration + 1 == cfg.iterations {
            log::info!("iteration {iteration}: {} loss {:.6}", kind.as_str(), obj.loss);
        }
        trace.push(LossRecord {
            iteration,
            loss: obj.loss,
            kind,
        });
    }
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            model,
            iteration: init.iteration + cfg.iterations as u64,
            train_seed: cfg.seed,
        },
        trace,
    })
}

/// Writes the trace as `iteration,loss,kind` CSV.
pub fn write_loss_trace(trace: &[LossRecord], path: &Path) -> Result<(), MetricError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iteration,loss,kind")?;
    for r in trace {
        writeln!(out, "{},{},{}", r.iteration, r.loss, r.kind.as_str())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EmbedderConfig;
    use crate::synthdata::{generate_dataset, SynthConfig};
    use rand::Rng;

    fn small_config() -> EmbedderConfig {
        EmbedderConfig {
            input_side: 64,
            stage2_grid: 4,
            stage1_channels: 8,
            stage2_channels: 8,
            feature_dim: 16,
            head_hidden: 16,
            embed_dim: 32,
            se_reduction: 2,
            ..EmbedderConfig::default()
        }
    }

    fn synth_set(per_class: usize, side: usize, seed: u64) -> TrainingSet {
        let cfg = SynthConfig {
            per_class_counts: [per_class; 3],
            side,
            seed,
            val_fraction: 0.2,
            ..SynthConfig::default()
        };
        let (_, records) = generate_dataset(&cfg).unwrap();
        let pre = Preprocessor::new(side).with_crop_pad(side / 16);
        let images = records.iter().map(|r| pre.prepare_eval(&r.image).unwrap()).collect();
        let labels = records.iter().map(|r| r.meta.label).collect();
        TrainingSet::new(images, labels, pre.crop_pad)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[3.0, -0.1, 0.0]);
        // Bias-corrected first step is lr * sign(g).
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let mut model = Embedder::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in model.params_mut() {
            *p += rng.gen_range(-0.01..0.01);
        }
        let labels = vec![
            ClassLabel::Control,
            ClassLabel::Control,
            ClassLabel::NonCovidPneumonia,
            ClassLabel::NonCovidPneumonia,
            ClassLabel::Covid19,
            ClassLabel::Covid19,
        ];
        let images: Vec<ImageBuffer> = (0..labels.len())
            .map(|_| ImageBuffer::from_fn(64, 64, |_, _| rng.gen_range(0.0..1.0)))
            .collect();
        let cfg = LossConfig {
            epsilon_mine: f64::INFINITY,
            ..LossConfig::default()
        };
        for kind in [LossKind::Ms, LossKind::InfoNce] {
            let obj = batch_objective(&model, &images, &labels, &cfg, kind, None).unwrap();
            let mined = obj.mined.clone();
            let h = 1e-4;
            let n = model.param_count();
            let mut checked = 0;
            for _ in 0..24 {
                let idx = rng.gen_range(0..n);
                let orig = model.params()[idx];
                model.params_mut()[idx] = orig + h;
                let plus = batch_objective(&model, &images, &labels, &cfg, kind, mined.as_ref()).unwrap().loss;
                model.params_mut()[idx] = orig - h;
                let minus = batch_objective(&model, &images, &labels, &cfg, kind, mined.as_ref()).unwrap().loss;
                model.params_mut()[idx] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = obj.grads[idx];
                let denom = fd.abs().max(an.abs()).max(1e-7);
                assert!((fd - an).abs() / denom < 1e-3, "{kind:?} [{idx}]: fd {fd} analytic {an}");
                checked += 1;
            }
            assert!(checked >= 20);
        }
    }

    #[test]
    fn zero_iterations_returns_init() {
        let set = synth_set(6, 64, 1);
        let init = ModelCheckpoint::init(small_config()).unwrap();
        let cfg = LossConfig {
            iterations: 0,
            samples_per_class: 4,
            ..LossConfig::default()
        };
        let out = train(&init, &set, &cfg, LossKind::Ms).unwrap();
        assert_eq!(out.checkpoint, init);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn loss_descends_and_is_deterministic() {
        let set = synth_set(60, 64, 2);
        let init = ModelCheckpoint::init(small_config()).unwrap();
        let cfg = LossConfig {
            iterations: 50,
            lr: 1e-3,
            samples_per_class: 8,
            seed: 3,
            ..LossConfig::default()
        };
        let a = train(&init, &set, &cfg, LossKind::Ms).unwrap();
        let b = train(&init, &set, &cfg, LossKind::Ms).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint, b.checkpoint);
        let lead: f64 = a.trace[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let trail: f64 = a.trace[40..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(trail < lead, "leading {lead} trailing {trail}");
        assert_eq!(a.checkpoint.iteration, 50);
    }

    #[test]
    fn empty_class_aborts() {
        let mut set = synth_set(6, 64, 1);
        let keep: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] != ClassLabel::Covid19).collect();
        set.images = keep.iter().map(|&i| set.images[i].clone()).collect();
        set.labels = keep.iter().map(|&i| set.labels[i]).collect();
        let init = ModelCheckpoint::init(small_config()).unwrap();
        let cfg = LossConfig {
            iterations: 1,
            ..LossConfig::default()
        };
        assert!(matches!(
            train(&init, &set, &cfg, LossKind::Ms),
            Err(MetricError::EmptyClass(ClassLabel::Covid19))
        ));
    }

    #[test]
    fn loss_trace_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = vec![
            LossRecord {
                iteration: 0,
                loss: 0.5,
                kind: LossKind::Ms,
            },
            LossRecord {
                iteration: 1,
                loss: 0.25,
                kind: LossKind::Ms,
            },
        ];
        write_loss_trace(&trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iteration,loss,kind\n0,0.5,ms\n1,0.25,ms\n");
    }
}
