//! Exact cosine gallery search, distance-weighted KNN voting and the
//! retrieval/diagnosis evaluation harness.

mod eval;
mod store;

pub use eval::{
    eval_diagnosis, eval_recall_at_k, random_baseline_recall, recall_curve, DiagnosisReport, RecallReport,
    MIN_BASELINE_TRIALS,
};
pub use store::{load_index, save_index, IndexMeta, EMBEDDINGS_FILE, INDEX_META_FILE};

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassLabel, ClinicalRecord, DatasetManifest, Split};
use crate::embedder::{EmbedError, Embedder, EmbeddingVector};
use crate::preprocess::{PreprocessError, Preprocessor};

/// Allowed deviation of a stored row's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;
/// Neighbor count used for diagnosis unless configured otherwise.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("row `{id}` has norm {norm}, expected 1")]
    NotNormalized { id: String, norm: f64 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("retrieval result is empty")]
    EmptyResult,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query id `{0}` is also in the gallery")]
    IdOverlap(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("index was built with model {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error at {path}: {source}")]
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

/// Immutable gallery of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    labels: Vec<ClassLabel>,
    dim: usize,
    matrix: Vec<f64>,
    model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub id: String,
    pub label: ClassLabel,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinical: Option<ClinicalRecord>,
}

/// Neighbors ordered by similarity descending, then id ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entries: Vec<RetrievalEntry>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fills clinical fields from the manifest records with matching ids.
    pub fn attach_clinical(&mut self, manifest: &DatasetManifest) {
        for e in &mut self.entries {
            e.clinical = manifest.get(&e.id).and_then(|r| r.clinical.clone());
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn build_index(
    embeddings: Vec<EmbeddingVector>,
    ids: Vec<String>,
    labels: Vec<ClassLabel>,
    model_hash: impl Into<String>,
) -> Result<EmbeddingIndex, RetrievalError> {
    if embeddings.len() != ids.len() || ids.len() != labels.len() {
        return Err(RetrievalError::LengthMismatch(format!(
            "{} embeddings, {} ids, {} labels",
            embeddings.len(),
            ids.len(),
            labels.len()
        )));
    }
    let dim = embeddings.first().map_or(0, EmbeddingVector::len);
    let mut seen = HashSet::with_capacity(ids.len());
    let mut matrix = Vec::with_capacity(dim * ids.len());
    for (e, id) in embeddings.iter().zip(&ids) {
        if !seen.insert(id.as_str()) {
            return Err(RetrievalError::DuplicateId(id.clone()));
        }
        if e.len() != dim {
            return Err(RetrievalError::LengthMismatch(format!(
                "row `{id}` has dimension {}, expected {dim}",
                e.len()
            )));
        }
        let norm = l2(e.as_slice());
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(RetrievalError::NotNormalized { id: id.clone(), norm });
        }
        matrix.extend_from_slice(e.as_slice());
    }
    Ok(EmbeddingIndex {
        ids,
        labels,
        dim,
        matrix,
        model_hash: model_hash.into(),
    })
}

/// Embeds every record of `split` and indexes it; ids and labels come from
/// the manifest.
pub fn index_from_manifest(
    model: &Embedder,
    manifest: &DatasetManifest,
    split: Split,
    pre: &Preprocessor,
    model_hash: impl Into<String>,
) -> Result<EmbeddingIndex, RetrievalError> {
    let mut embeddings = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for rec in manifest.split(split) {
        let img = pre.load_eval(&manifest.resolve(rec))?;
        embeddings.push(model.embed(&img)?);
        ids.push(rec.id.clone());
        labels.push(rec.label);
    }
    build_index(embeddings, ids, labels, model_hash)
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn label_counts(&self) -> [usize; ClassLabel::COUNT] {
        let mut counts = [0; ClassLabel::COUNT];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    fn similarities(&self, q: &[f64]) -> Result<Vec<f64>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if q.len() != self.dim {
            return Err(RetrievalError::LengthMismatch(format!(
                "query has dimension {}, index {}",
                q.len(),
                self.dim
            )));
        }
        Ok(self
            .matrix
            .chunks(self.dim)
            .map(|row| row.iter().zip(q).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Gallery positions ordered by (similarity desc, id asc), truncated to `k`.
    fn ranked(&self, q: &[f64], k: usize) -> Result<Vec<(usize, f64)>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let sims = self.similarities(q)?;
        let cmp = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        };
        let mut order: Vec<(usize, f64)> = sims.into_iter().enumerate().collect();
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order)
    }

    /// Exact top-`k` by cosine similarity over the whole gallery.
    pub fn query_topk(&self, q: &EmbeddingVector, k: usize) -> Result<RetrievalResult, RetrievalError> {
        let norm = q.norm();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(RetrievalError::NotNormalized {
                id: "<query>".into(),
                norm,
            });
        }
        let entries = self
            .ranked(q.as_slice(), k)?
            .into_iter()
            .map(|(i, s)| RetrievalEntry {
                id: self.ids[i].clone(),
                label: self.labels[i],
                similarity: s,
                clinical: None,
            })
            .collect();
        Ok(RetrievalResult { entries })
    }
}

/// Vote weight of a neighbor at cosine similarity `s`: inverse Euclidean
/// distance between unit vectors, clamped.
pub fn neighbor_weight(s: f64) -> f64 {
    let d = (2.0 * (1.0 - s)).max(0.0).sqrt();
    1.0 / d.max(1e-12)
}

/// Distance-weighted vote; exact ties go to the earlier `ClassLabel`.
pub fn knn_classify(result: &RetrievalResult) -> Result<(ClassLabel, [f64; ClassLabel::COUNT]), RetrievalError> {
    if result.is_empty() {
        return Err(RetrievalError::EmptyResult);
    }
    let mut scores = [0.0; ClassLabel::COUNT];
    for e in &result.entries {
        scores[e.label.index()] += neighbor_weight(e.similarity);
    }
    Ok((argmax_label(&scores), scores))
}

fn argmax_label(scores: &[f64; ClassLabel::COUNT]) -> ClassLabel {
    let mut best = 0;
    for c in 1..ClassLabel::COUNT {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    ClassLabel::ALL[best]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassLabel::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn unit(v: Vec<f64>) -> EmbeddingVector {
        let n = l2(&v);
        EmbeddingVector(v.into_iter().map(|x| x / n).collect())
    }

    pub(crate) fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn small_index() -> EmbeddingIndex {
        build_index(
            vec![unit(vec![1.0, 0.0]), unit(vec![0.6, 0.8]), unit(vec![0.0, 1.0])],
            vec!["a".into(), "b".into(), "c".into()],
            vec![Control, NonCovidPneumonia, Covid19],
            "h",
        )
        .unwrap()
    }

    fn entry(label: ClassLabel, similarity: f64) -> RetrievalEntry {
        RetrievalEntry {
            id: String::new(),
            label,
            similarity,
            clinical: None,
        }
    }

    #[test]
    fn build_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<_> = (0..100).map(|_| random_unit(&mut rng, 8)).collect();
        let ids: Vec<String> = (0..100).map(|i| format!("r{i}")).collect();
        let labels = vec![Control; 100];
        assert_eq!(build_index(rows.clone(), ids.clone(), labels.clone(), "h").unwrap().len(), 100);

        let mut half = rows.clone();
        half[3] = EmbeddingVector(half[3].0.iter().map(|x| x * 0.5).collect());
        assert!(matches!(
            build_index(half, ids.clone(), labels.clone(), "h"),
            Err(RetrievalError::NotNormalized { .. })
        ));

        let mut dup = ids.clone();
        dup[7] = "r1".into();
        assert!(matches!(
            build_index(rows, dup, labels, "h"),
            Err(RetrievalError::DuplicateId(id)) if id == "r1"
        ));
    }

    #[test]
    fn topk_examples() {
        let idx = small_index();
        let r = idx.query_topk(&unit(vec![1.0, 0.0]), 2).unwrap();
        let sims: Vec<f64> = r.entries.iter().map(|e| e.similarity).collect();
        assert_eq!(r.entries[0].id, "a");
        assert!((sims[0] - 1.0).abs() < 1e-12 && (sims[1] - 0.6).abs() < 1e-12);

        let all = idx.query_topk(&unit(vec![0.0, 1.0]), 10).unwrap();
        assert_eq!(all.len(), 3);
        let ids: Vec<&str> = all.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["c", "b", "a"]);

        assert!(matches!(idx.query_topk(&unit(vec![1.0, 0.0]), 0), Err(RetrievalError::InvalidK)));
        let empty = build_index(vec![], vec![], vec![], "h").unwrap();
        assert!(matches!(empty.query_topk(&unit(vec![1.0, 0.0]), 1), Err(RetrievalError::EmptyIndex)));
    }

    #[test]
    fn ties_break_by_id() {
        let v = unit(vec![1.0, 1.0]);
        let idx = build_index(
            vec![v.clone(), v.clone(), v.clone()],
            vec!["z".into(), "m".into(), "a".into()],
            vec![Control; 3],
            "h",
        )
        .unwrap();
        let r = idx.query_topk(&v, 2).unwrap();
        let ids: Vec<&str> = r.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "m"]);
    }

    #[test]
    fn topk_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let dim = rng.gen_range(2..9);
            let rows: Vec<_> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
            let ids: Vec<String> = (0..n).map(|i| format!("{:03}", rng.gen_range(0..1000) * 100 + i)).collect();
            let labels: Vec<_> = (0..n).map(|_| ClassLabel::ALL[rng.gen_range(0..3)]).collect();
            let idx = build_index(rows.clone(), ids.clone(), labels, "h").unwrap();
            let q = random_unit(&mut rng, dim);
            let k = rng.gen_range(1..n + 3);

            let mut brute: Vec<(f64, String)> = rows
                .iter()
                .zip(&ids)
                .map(|(r, id)| (r.0.iter().zip(&q.0).map(|(a, b)| a * b).sum(), id.clone()))
                .collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            brute.truncate(k);
            let got = idx.query_topk(&q, k).unwrap();
            assert_eq!(got.len(), brute.len());
            for (e, (s, id)) in got.entries.iter().zip(&brute) {
                assert_eq!(&e.id, id);
                assert!((e.similarity - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knn_examples() {
        let r = RetrievalResult {
            entries: vec![entry(Covid19, 0.95), entry(Control, 0.90), entry(Control, 0.85)],
        };
        let (label, scores) = knn_classify(&r).unwrap();
        assert_eq!(label, Control);
        assert!((neighbor_weight(0.95) - 3.162_277_660_168_38).abs() < 1e-9);
        assert!((neighbor_weight(0.90) - 2.236_067_977_499_79).abs() < 1e-9);
        assert!((neighbor_weight(0.85) - 1.825_741_858_350_55).abs() < 1e-9);
        assert!((scores[Control.index()] - 4.061_809_835_850_35).abs() < 1e-9);
        assert!((scores[Covid19.index()] - 3.162_277_660_168_38).abs() < 1e-9);

        let single = RetrievalResult {
            entries: vec![entry(NonCovidPneumonia, 0.1)],
        };
        assert_eq!(knn_classify(&single).unwrap().0, NonCovidPneumonia);

        let dup = RetrievalResult {
            entries: vec![entry(Covid19, 1.0), entry(Control, 0.99), entry(Control, 0.98)],
        };
        let (label, scores) = knn_classify(&dup).unwrap();
        assert_eq!(label, Covid19);
        assert_eq!(scores[Covid19.index()], 1e12);

        assert!(matches!(
            knn_classify(&RetrievalResult::default()),
            Err(RetrievalError::EmptyResult)
        ));
    }

    #[test]
    fn exact_ties_follow_label_order() {
        let r = RetrievalResult {
            entries: vec![entry(Covid19, 0.5), entry(NonCovidPneumonia, 0.5)],
        };
        assert_eq!(knn_classify(&r).unwrap().0, NonCovidPneumonia);
    }

    /// Recomputes the vote in rational arithmetic. The square root is taken
    /// as an integer root scaled by 2^200, far below any float separation.
    fn exact_vote(entries: &[RetrievalEntry]) -> ClassLabel {
        let zero = BigRational::from_integer(BigInt::from(0));
        let one = BigRational::from_integer(BigInt::from(1));
        let scale = BigInt::from(1u8) << 200u32;
        let clamp = BigRational::from_float(1e-12).unwrap();
        let mut scores = vec![zero; 3];
        for e in entries {
            let u = BigRational::from_integer(BigInt::from(2)) * (one.clone() - BigRational::from_float(e.similarity).unwrap());
            let root = (u.numer() * u.denom() * &scale * &scale).sqrt();
            let d = BigRational::new(root, u.denom() * &scale);
            let d = if d < clamp { clamp.clone() } else { d };
            scores[e.label.index()] += d.recip();
        }
        let mut best = 0;
        for c in 1..3 {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        ClassLabel::ALL[best]
    }

    #[test]
    fn knn_matches_exact_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let n = rng.gen_range(1..12);
            let entries: Vec<RetrievalEntry> = (0..n)
                .map(|_| entry(ClassLabel::ALL[rng.gen_range(0..3)], rng.gen_range(-1.0..1.0)))
                .collect();
            let got = knn_classify(&RetrievalResult { entries: entries.clone() }).unwrap().0;
            assert_eq!(got, exact_vote(&entries));
        }
    }

    proptest! {
        #[test]
        fn weight_scaling_keeps_argmax(sims in prop::collection::vec((0usize..3, -1.0f64..1.0), 1..12), c in 0.01f64..100.0) {
            let entries: Vec<RetrievalEntry> = sims.iter().map(|&(l, s)| entry(ClassLabel::ALL[l], s)).collect();
            let (label, scores) = knn_classify(&RetrievalResult { entries }).unwrap();
            let scaled = [scores[0] * c, scores[1] * c, scores[2] * c];
            let margin = scores.iter().fold(0.0f64, |m, &s| m.max(s)) * 1e-12;
            let best = scores[label.index()];
            // Scaled argmax can only move when two scores are within rounding of each other.
            if scores.iter().enumerate().all(|(i, &s)| i == label.index() || best - s > margin) {
                prop_assert_eq!(argmax_label(&scaled), label);
            }
        }
    }
}
