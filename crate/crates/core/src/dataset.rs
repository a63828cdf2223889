//! Domain types shared by every stage: labels, image records, clinical
//! metadata, the dataset manifest and stratified splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("image `{id}` references missing file {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("class {label} has {count} images, at least {required} required")]
    InsufficientClassCount {
        label: ClassLabel,
        count: usize,
        required: usize,
    },
    #[error("invalid validation fraction {0}; must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Ternary diagnosis label. The declaration order is the tie-break order used
/// everywhere downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "control")]
    Control,
    #[serde(rename = "pneumonia")]
    NonCovidPneumonia,
    #[serde(rename = "covid19")]
    Covid19,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::Control,
        ClassLabel::NonCovidPneumonia,
        ClassLabel::Covid19,
    ];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Control => "control",
            ClassLabel::NonCovidPneumonia => "pneumonia",
            ClassLabel::Covid19 => "covid19",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "control" => Ok(ClassLabel::Control),
            "pneumonia" => Ok(ClassLabel::NonCovidPneumonia),
            "covid19" => Ok(ClassLabel::Covid19),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

/// Per-patient metadata shown next to retrieved images. Absent optional
/// values are omitted from JSON rather than written as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub age: f64,
    #[serde(default)]
    pub sex: Sex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rale: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spo2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wbc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icu: Option<bool>,
}

impl ClinicalRecord {
    fn validate(&self, id: &str) -> Result<(), DatasetError> {
        if let Some(rale) = self.rale {
            if rale > 48 {
                return Err(DatasetError::Parse(format!(
                    "image `{id}`: rale {rale} outside [0, 48]"
                )));
            }
        }
        if let Some(spo2) = self.spo2 {
            if !(0.0..=100.0).contains(&spo2) {
                return Err(DatasetError::Parse(format!(
                    "image `{id}`: spo2 {spo2} outside [0, 100]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: ClassLabel,
    pub split: Split,
    #[serde(default)]
    pub site: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinical: Option<ClinicalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub images: Vec<ImageRecord>,
    /// Directory relative image paths are resolved against. Not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn new(images: Vec<ImageRecord>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            images,
            root: PathBuf::new(),
        }
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> + '_ {
        self.images.iter().filter(move |r| r.split == split)
    }

    /// A manifest holding only the records of one split.
    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            version: self.version,
            images: self.split(split).cloned().collect(),
            root: self.root.clone(),
        }
    }

    pub fn label_counts(&self) -> [usize; ClassLabel::COUNT] {
        count_labels(self.images.iter())
    }

    pub fn split_label_counts(&self, split: Split) -> [usize; ClassLabel::COUNT] {
        count_labels(self.split(split))
    }

    fn check_unique_ids(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::with_capacity(self.images.len());
        for record in &self.images {
            if !seen.insert(record.id.as_str()) {
                return Err(DatasetError::DuplicateId(record.id.clone()));
            }
        }
        Ok(())
    }

    /// Parses manifest JSON and checks id uniqueness and clinical ranges,
    /// without touching the filesystem.
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let manifest: DatasetManifest =
            serde_json::from_str(text).map_err(|e| DatasetError::Parse(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(DatasetError::Parse(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        manifest.check_unique_ids()?;
        for record in &manifest.images {
            if let Some(clinical) = &record.clinical {
                clinical.validate(&record.id)?;
            }
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_json()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn count_labels<'a>(records: impl Iterator<Item = &'a ImageRecord>) -> [usize; ClassLabel::COUNT] {
    let mut counts = [0; ClassLabel::COUNT];
    for r in records {
        counts[r.label.index()] += 1;
    }
    counts
}

/// Reads a manifest, validates it and checks that every referenced image
/// exists. Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut manifest = DatasetManifest::from_json(&text)?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    for record in &manifest.images {
        let resolved = manifest.resolve(record);
        if !resolved.is_file() {
            return Err(DatasetError::MissingFile {
                id: record.id.clone(),
                path: resolved,
            });
        }
    }
    Ok(manifest)
}

/// Reassigns the train/val split so each class contributes
/// `round(count * val_fraction)` validation images. Within a class, records
/// are dealt round-robin across sites so every site with enough images shows
/// up on both sides.
pub fn split_stratified(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(val_fraction));
    }
    let counts = manifest.label_counts();
    for label in ClassLabel::ALL {
        let count = counts[label.index()];
        if count > 0 && count < 2 {
            return Err(DatasetError::InsufficientClassCount {
                label,
                count,
                required: 2,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    for label in ClassLabel::ALL {
        let count = counts[label.index()];
        if count == 0 {
            continue;
        }
        let n_val = ((count as f64) * val_fraction).round() as usize;
        let n_val = n_val.clamp(1, count - 1);

        // Group by site (BTreeMap keeps the iteration order seed-independent).
        let mut by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in manifest.images.iter().enumerate() {
            if r.label == label {
                by_site.entry(r.site.as_str()).or_default().push(i);
            }
        }
        let mut groups: Vec<Vec<usize>> = by_site.into_values().collect();
        for g in &mut groups {
            g.shuffle(&mut rng);
        }
        // Interleave sites so taking a prefix samples each site proportionally.
        let mut order = Vec::with_capacity(count);
        let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
        for round in 0..longest {
            for g in &groups {
                if let Some(&i) = g.get(round) {
                    order.push(i);
                }
            }
        }
        for (rank, &i) in order.iter().enumerate() {
            out.images[i].split = if rank < n_val { Split::Val } else { Split::Train };
        }
    }
    Ok(out)
}
