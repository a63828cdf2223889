use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{knn_classify, EmbeddingIndex, RetrievalError};
use crate::dataset::ClassLabel;

/// Smallest trial count for which the Monte Carlo baseline is trusted to
/// about three decimals.
pub const MIN_BASELINE_TRIALS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    pub overall: f64,
    pub per_class: BTreeMap<ClassLabel, f64>,
    pub queries: usize,
}

fn check_disjoint(gallery: &EmbeddingIndex, queries: &EmbeddingIndex) -> Result<(), RetrievalError> {
    let ids: HashSet<&str> = gallery.ids().iter().map(String::as_str).collect();
    match queries.ids().iter().find(|q| ids.contains(q.as_str())) {
        Some(id) => Err(RetrievalError::IdOverlap(id.clone())),
        None => Ok(()),
    }
}

/// Recall at every `k` in `1..=max_k`, ranking each query once.
pub fn recall_curve(
    gallery: &EmbeddingIndex,
    queries: &EmbeddingIndex,
    max_k: usize,
) -> Result<Vec<RecallReport>, RetrievalError> {
    if max_k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if queries.is_empty() {
        return Err(RetrievalError::InvalidArgument("query set is empty".into()));
    }
    check_disjoint(gallery, queries)?;
    // Rank of the first same-label neighbor, or `max_k` when none is found.
    let mut first_hit = Vec::with_capacity(queries.len());
    for q in 0..queries.len() {
        let label = queries.labels()[q];
        let ranked = gallery.ranked(queries.row(q), max_k)?;
        let hit = ranked.iter().position(|&(g, _)| gallery.labels()[g] == label).unwrap_or(max_k);
        first_hit.push(hit);
    }
    let mut class_totals = [0usize; ClassLabel::COUNT];
    for l in queries.labels() {
        class_totals[l.index()] += 1;
    }
    let reports = (1..=max_k)
        .map(|k| {
            let mut hits = [0usize; ClassLabel::COUNT];
            for (q, &h) in first_hit.iter().enumerate() {
                if h < k {
                    hits[queries.labels()[q].index()] += 1;
                }
            }
            let per_class = ClassLabel::ALL
                .iter()
                .filter(|c| class_totals[c.index()] > 0)
                .map(|&c| (c, hits[c.index()] as f64 / class_totals[c.index()] as f64))
                .collect();
            RecallReport {
                k,
                overall: hits.iter().sum::<usize>() as f64 / queries.len() as f64,
                per_class,
                queries: queries.len(),
            }
        })
        .collect();
    Ok(reports)
}

/// Fraction of queries with at least one same-label item among the top `k`.
pub fn eval_recall_at_k(
    gallery: &EmbeddingIndex,
    queries: &EmbeddingIndex,
    k: usize,
) -> Result<RecallReport, RetrievalError> {
    Ok(recall_curve(gallery, queries, k)?.pop().expect("k >= 1"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub k: usize,
    pub accuracy: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: [[usize; ClassLabel::COUNT]; ClassLabel::COUNT],
    /// `None` when the class never occurs in the truth.
    pub sensitivity: BTreeMap<ClassLabel, Option<f64>>,
    /// `None` when the class is never predicted.
    pub ppv: BTreeMap<ClassLabel, Option<f64>>,
    pub queries: usize,
}

impl DiagnosisReport {
    pub fn from_predictions(truth: &[ClassLabel], predicted: &[ClassLabel], k: usize) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let mut confusion = [[0usize; ClassLabel::COUNT]; ClassLabel::COUNT];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.index()][p.index()] += 1;
        }
        let mut sensitivity = BTreeMap::new();
        let mut ppv = BTreeMap::new();
        for c in ClassLabel::ALL {
            let i = c.index();
            let tp = confusion[i][i] as f64;
            let row: usize = confusion[i].iter().sum();
            let col: usize = confusion.iter().map(|r| r[i]).sum();
            sensitivity.insert(c, (row > 0).then(|| tp / row as f64));
            ppv.insert(c, (col > 0).then(|| tp / col as f64));
        }
        let correct: usize = (0..ClassLabel::COUNT).map(|i| confusion[i][i]).sum();
        Self {
            k,
            accuracy: if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 },
            confusion,
            sensitivity,
            ppv,
            queries: truth.len(),
        }
    }
}

impl fmt::Display for DiagnosisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        writeln!(f, "k = {}, queries = {}, accuracy = {:.4}", self.k, self.queries, self.accuracy)?;
        writeln!(f, "{:<10} {:>11} {:>8}   confusion (pred control/pneumonia/covid19)", "class", "sensitivity", "ppv")?;
        for c in ClassLabel::ALL {
            let row = &self.confusion[c.index()];
            writeln!(
                f,
                "{:<10} {:>11} {:>8}   {:>5} {:>5} {:>5}",
                c.as_str(),
                show(self.sensitivity[&c]),
                show(self.ppv[&c]),
                row[0],
                row[1],
                row[2]
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for RecallReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "recall@{} = {:.4} over {} queries", self.k, self.overall, self.queries)?;
        for (c, v) in &self.per_class {
            write!(f, "; {} {:.4}", c.as_str(), v)?;
        }
        Ok(())
    }
}

/// Predicts every query by distance-weighted vote over its top `k`.
pub fn eval_diagnosis(
    gallery: &EmbeddingIndex,
    queries: &EmbeddingIndex,
    k: usize,
) -> Result<DiagnosisReport, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    check_disjoint(gallery, queries)?;
    let mut predicted = Vec::with_capacity(queries.len());
    for q in 0..queries.len() {
        let entries = gallery
            .ranked(queries.row(q), k)?
            .into_iter()
            .map(|(g, s)| super::RetrievalEntry {
                id: gallery.ids()[g].clone(),
                label: gallery.labels()[g],
                similarity: s,
                clinical: None,
            })
            .collect();
        predicted.push(knn_classify(&super::RetrievalResult { entries })?.0);
    }
    Ok(DiagnosisReport::from_predictions(queries.labels(), &predicted, k))
}

/// Monte Carlo recall of a retriever that returns `k` gallery items drawn
/// uniformly without replacement. Query labels follow the gallery's class
/// distribution.
pub fn random_baseline_recall(
    class_counts: &[usize; ClassLabel::COUNT],
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<f64, RetrievalError> {
    let total: usize = class_counts.iter().sum();
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if k > total {
        return Err(RetrievalError::InvalidArgument(format!("k = {k} exceeds gallery size {total}")));
    }
    if trials < MIN_BASELINE_TRIALS {
        return Err(RetrievalError::InvalidArgument(format!(
            "need at least {MIN_BASELINE_TRIALS} trials, got {trials}"
        )));
    }
    let label_of = |pos: usize| -> usize {
        let mut acc = 0;
        for (c, &n) in class_counts.iter().enumerate() {
            acc += n;
            if pos < acc {
                return c;
            }
        }
        unreachable!("position inside gallery")
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let query = label_of(rng.gen_range(0..total));
        if index::sample(&mut rng, total, k).into_iter().any(|p| label_of(p) == query) {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}
