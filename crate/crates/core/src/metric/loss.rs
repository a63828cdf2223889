use serde::{Deserialize, Serialize};

use super::{MetricError, MinedPairs, SimilarityMatrix};
use crate::dataset::ClassLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ms,
    InfoNce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ms => "ms",
            LossKind::InfoNce => "infonce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ms" => Ok(LossKind::Ms),
            "infonce" => Ok(LossKind::InfoNce),
            other => Err(format!("unknown loss kind `{other}` (expected ms|infonce)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon_mine: f64,
    /// Classes per batch.
    pub classes_per_batch: usize,
    /// Samples per class.
    pub samples_per_class: usize,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    /// InfoNCE temperature.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 20.0,
            lambda: 0.5,
            epsilon_mine: 0.1,
            classes_per_batch: 3,
            samples_per_class: 16,
            lr: 3e-5,
            iterations: 2000,
            seed: 0,
            temperature: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: &str| Err(MetricError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad("lambda must lie in (0, 1)");
        }
        if self.epsilon_mine < 0.0 || self.epsilon_mine.is_nan() {
            return bad("epsilon_mine must be non-negative");
        }
        if self.classes_per_batch < 2 || self.classes_per_batch > ClassLabel::COUNT {
            return bad("classes_per_batch must be between 2 and the number of classes");
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be at least 2");
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return bad("lr and temperature must be positive");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }
}

/// `log(1 + sum exp(x))`, computed stably.
fn log1p_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(0.0f64, f64::max);
    let sum: f64 = (-max).exp() + xs.map(|x| (x - max).exp()).sum::<f64>();
    max + sum.ln()
}

/// Multi-similarity loss over the mined pairs; `m` is the number of anchors.
pub fn ms_loss(s: &SimilarityMatrix, mined: &MinedPairs, cfg: &LossConfig) -> f64 {
    let (alpha, beta, lambda) = (cfg.alpha, cfg.beta, cfg.lambda);
    let m = s.size;
    let mut total = 0.0;
    for i in 0..m {
        let pos = &mined.positives[i];
        let neg = &mined.negatives[i];
        if !pos.is_empty() {
            total += log1p_sum_exp(pos.iter().map(|&j| -alpha * (s.get(i, j) - lambda))) / alpha;
        }
        if !neg.is_empty() {
            total += log1p_sum_exp(neg.iter().map(|&j| beta * (s.get(i, j) - lambda))) / beta;
        }
    }
    total / m as f64
}

/// Loss and `dL/dS` for the multi-similarity objective. The gradient is row
/// major, `grad[i * m + j]` being the derivative w.r.t. the anchor-`i` use of
/// `S_ij`; mined sets are held fixed.
pub fn ms_loss_grad(s: &SimilarityMatrix, mined: &MinedPairs, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let (alpha, beta, lambda) = (cfg.alpha, cfg.beta, cfg.lambda);
    let m = s.size;
    let inv_m = 1.0 / m as f64;
    let mut grad = vec![0.0; m * m];
    for i in 0..m {
        let pos = &mined.positives[i];
        if !pos.is_empty() {
            let xs: Vec<f64> = pos.iter().map(|&j| -alpha * (s.get(i, j) - lambda)).collect();
            let lse = log1p_sum_exp(xs.iter().copied());
            for (&j, &x) in pos.iter().zip(&xs) {
                // d/dS [ (1/a) log(1 + sum e^x) ] = -(e^x / (1 + sum))
                grad[i * m + j] -= inv_m * (x - lse).exp();
            }
        }
        let neg = &mined.negatives[i];
        if !neg.is_empty() {
            let xs: Vec<f64> = neg.iter().map(|&j| beta * (s.get(i, j) - lambda)).collect();
            let lse = log1p_sum_exp(xs.iter().copied());
            for (&j, &x) in neg.iter().zip(&xs) {
                grad[i * m + j] += inv_m * (x - lse).exp();
            }
        }
    }
    (ms_loss(s, mined, cfg), grad)
}

/// Supervised InfoNCE: per anchor, the mean over positives of the negative
/// log softmax over all non-self candidates, averaged over anchors.
pub fn infonce_loss(s: &SimilarityMatrix, temperature: f64) -> Result<f64, MetricError> {
    Ok(infonce_loss_grad(s, temperature)?.0)
}

pub fn infonce_loss_grad(s: &SimilarityMatrix, temperature: f64) -> Result<(f64, Vec<f64>), MetricError> {
    let m = s.size;
    let inv_m = 1.0 / m as f64;
    let mut grad = vec![0.0; m * m];
    let mut total = 0.0;
    for i in 0..m {
        let others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        let positives: Vec<usize> = others.iter().copied().filter(|&j| s.labels[j] == s.labels[i]).collect();
        if positives.is_empty() {
            return Err(MetricError::DegenerateBatch {
                anchor: i,
                missing: "positive",
            });
        }
        let logits: Vec<f64> = others.iter().map(|&j| s.get(i, j) / temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let inv_p = 1.0 / positives.len() as f64;
        let mean_pos = positives.iter().map(|&j| s.get(i, j) / temperature).sum::<f64>() * inv_p;
        total += lse - mean_pos;
        for (&j, &l) in others.iter().zip(&logits) {
            grad[i * m + j] += inv_m * (l - lse).exp() / temperature;
        }
        for &j in &positives {
            grad[i * m + j] -= inv_m * inv_p / temperature;
        }
    }
    Ok((total * inv_m, grad))
}
