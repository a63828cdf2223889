use serde::{Deserialize, Serialize};

use super::{TransferError, TransferSample};

/// Which feature blocks enter the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Fused,
    ImageOnly,
    EhrOnly,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Fused, FeatureSet::ImageOnly, FeatureSet::EhrOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSet::Fused => "fused",
            FeatureSet::ImageOnly => "image_only",
            FeatureSet::EhrOnly => "ehr_only",
        }
    }

    fn uses_image(self) -> bool {
        self != FeatureSet::EhrOnly
    }

    fn uses_ehr(self) -> bool {
        self != FeatureSet::ImageOnly
    }
}

const MIN_SD: f64 = 1e-12;

/// Training-fold statistics of one input column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    /// Imputation value: the median of the observed training values.
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    /// Dropped because it is constant on the training fold.
    pub dropped: bool,
    /// Emit a 0/1 missingness column next to the value.
    pub indicator: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fits statistics on `columns[c]` = the training values of column `c`.
fn fit_columns(columns: Vec<Vec<Option<f64>>>, block: &str) -> Vec<ColumnStats> {
    columns
        .into_iter()
        .enumerate()
        .map(|(c, col)| {
            let mut observed: Vec<f64> = col.iter().flatten().copied().collect();
            let indicator = observed.len() < col.len();
            let med = if observed.is_empty() { 0.0 } else { median(&mut observed) };
            let filled: Vec<f64> = col.iter().map(|v| v.unwrap_or(med)).collect();
            let n = filled.len().max(1) as f64;
            let mean = filled.iter().sum::<f64>() / n;
            let sd = (filled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let dropped = sd < MIN_SD;
            if dropped {
                log::warn!("{block} column {c} is constant on the training fold; dropped");
            }
            ColumnStats {
                median: med,
                mean,
                sd,
                dropped,
                indicator,
            }
        })
        .collect()
}

fn transform_columns(stats: &[ColumnStats], values: &[Option<f64>], out: &mut Vec<f64>) {
    for (s, v) in stats.iter().zip(values) {
        if !s.dropped {
            out.push((v.unwrap_or(s.median) - s.mean) / s.sd);
        }
        if s.indicator {
            out.push(if v.is_none() { 1.0 } else { 0.0 });
        }
    }
}

/// Standardize-then-concatenate fusion with statistics from a training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub set: FeatureSet,
    pub image: Vec<ColumnStats>,
    pub ehr: Vec<ColumnStats>,
}

impl FusionModel {
    pub fn fit(train: &[&TransferSample], set: FeatureSet) -> Result<Self, TransferError> {
        let first = train
            .first()
            .ok_or_else(|| TransferError::InsufficientSamples("empty training fold".into()))?;
        for s in train {
            s.check_finite()?;
        }
        let gather = |dim: usize, get: &dyn Fn(&TransferSample, usize) -> Option<f64>| -> Vec<Vec<Option<f64>>> {
            (0..dim).map(|c| train.iter().map(|s| get(s, c)).collect()).collect()
        };
        let image = if set.uses_image() {
            fit_columns(gather(first.image_features.len(), &|s, c| Some(s.image_features[c])), "image")
        } else {
            Vec::new()
        };
        let ehr = if set.uses_ehr() {
            fit_columns(gather(first.ehr.len(), &|s, c| s.ehr[c]), "ehr")
        } else {
            Vec::new()
        };
        Ok(Self { set, image, ehr })
    }

    pub fn output_dim(&self) -> usize {
        self.image
            .iter()
            .chain(&self.ehr)
            .map(|s| usize::from(!s.dropped) + usize::from(s.indicator))
            .sum()
    }

    /// One classifier input row.
    pub fn fuse(&self, image_features: &[f64], ehr: &[Option<f64>]) -> Result<Vec<f64>, TransferError> {
        if self.set.uses_image() && image_features.len() != self.image.len() {
            return Err(TransferError::ShapeMismatch(format!(
                "{} image features, fitted on {}",
                image_features.len(),
                self.image.len()
            )));
        }
        if self.set.uses_ehr() && ehr.len() != self.ehr.len() {
            return Err(TransferError::ShapeMismatch(format!(
                "{} EHR values, fitted on {}",
                ehr.len(),
                self.ehr.len()
            )));
        }
        if image_features.iter().chain(ehr.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(TransferError::NonFinite("fusion input".into()));
        }
        let mut row = Vec::with_capacity(self.output_dim());
        if self.set.uses_image() {
            let wrapped: Vec<Option<f64>> = image_features.iter().map(|&v| Some(v)).collect();
            transform_columns(&self.image, &wrapped, &mut row);
        }
        if self.set.uses_ehr() {
            transform_columns(&self.ehr, ehr, &mut row);
        }
        Ok(row)
    }

    pub fn transform(&self, sample: &TransferSample) -> Result<Vec<f64>, TransferError> {
        self.fuse(&sample.image_features, &sample.ehr)
    }
}
