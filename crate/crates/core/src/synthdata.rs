//! Deterministic lung-field phantoms with class-dependent lesion patterns.
//!
//! Every image shares one body/lung geometry. Control images carry only
//! texture and noise; pneumonia adds a focal blob cluster in one lung; COVID-19
//! adds diffuse blobs along the lateral, lower periphery of both lungs. Blob
//! radii scale with `sqrt(severity)` so lesion area is proportional to
//! severity. Every class also gets a few bright markers outside the lungs
//! (leads, tags) and jittered rib shadows, so the lungs are not the only
//! structure in the image. Each record draws from its own ChaCha stream, so
//! output depends only on the seed and the record's position.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    split_stratified, ClassLabel, ClinicalRecord, DatasetError, DatasetManifest, ImageRecord, Sex, Split,
};
use crate::preprocess::{BinaryMask, ImageBuffer, PreprocessError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] PreprocessError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Images per class in `ClassLabel` order.
    pub per_class_counts: [usize; 3],
    pub side: usize,
    /// Severity interval for diseased records.
    pub severity_range: (f64, f64),
    pub seed: u64,
    pub val_fraction: f64,
    pub sites: usize,
    /// Adds a fixed brightness offset per site.
    pub site_brightness_offset: bool,
    pub noise_sd: f64,
    pub texture_frequency: f64,
    pub pneumonia_blobs: usize,
    pub covid_blobs_per_lung: usize,
    /// Upper bound on bright non-pulmonary markers (leads, tags) per image.
    pub max_distractors: usize,
    pub distractor_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_class_counts: [100, 100, 100],
            side: 256,
            severity_range: (0.3, 1.0),
            seed: 0,
            val_fraction: 0.2,
            sites: 1,
            site_brightness_offset: false,
            noise_sd: 0.025,
            texture_frequency: 9.0,
            pneumonia_blobs: 4,
            covid_blobs_per_lung: 4,
            max_distractors: 6,
            distractor_amplitude: 0.45,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.side < 64 {
            return bad("side must be at least 64");
        }
        let (lo, hi) = self.severity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("severity_range must be an ordered sub-interval of [0, 1]");
        }
        if self.sites == 0 {
            return bad("sites must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub meta: ImageRecord,
    pub image: ImageBuffer,
    pub lesion_mask: BinaryMask,
    pub severity: f64,
}

impl SynthRecord {
    pub fn label(&self) -> ClassLabel {
        self.meta.label
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }
}

/// Ellipse in normalized image coordinates.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn inside(&self, u: f64, v: f64) -> bool {
        let dx = (u - self.cx) / self.rx;
        let dy = (v - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

const BODY: Ellipse = Ellipse {
    cx: 0.5,
    cy: 0.55,
    rx: 0.46,
    ry: 0.5,
};
const LUNGS: [Ellipse; 2] = [
    Ellipse {
        cx: 0.31,
        cy: 0.5,
        rx: 0.14,
        ry: 0.31,
    },
    Ellipse {
        cx: 0.69,
        cy: 0.5,
        rx: 0.14,
        ry: 0.31,
    },
];

const AIR_LEVEL: f64 = 0.08;
const TISSUE_LEVEL: f64 = 0.55;
const LUNG_LEVEL: f64 = 0.22;
const SITE_OFFSET_STEP: f64 = 0.03;

fn normalized(side: usize, y: usize, x: usize) -> (f64, f64) {
    ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64)
}

fn lung_index(u: f64, v: f64) -> Option<usize> {
    LUNGS.iter().position(|l| l.inside(u, v))
}

/// Union of both lung fields, identical for every generated image.
pub fn lung_mask(side: usize) -> BinaryMask {
    BinaryMask::from_fn(side, side, |y, x| {
        let (u, v) = normalized(side, y, x);
        lung_index(u, v).is_some()
    })
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    amplitude: f64,
}

fn pneumonia_blobs(cfg: &SynthConfig, severity: f64, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let lung = LUNGS[rng.gen_range(0..2)];
    let cx = lung.cx + rng.gen_range(-0.3..0.3) * lung.rx;
    let cy = lung.cy + rng.gen_range(-0.5..0.5) * lung.ry;
    let sigma = 0.035 * severity.sqrt();
    (0..cfg.pneumonia_blobs)
        .map(|_| Blob {
            cx: cx + rng.gen_range(-0.04..0.04),
            cy: cy + rng.gen_range(-0.05..0.05),
            sigma: sigma * rng.gen_range(0.85..1.15),
            amplitude: 0.38 * rng.gen_range(0.9..1.1),
        })
        .collect()
}

fn covid_blobs(cfg: &SynthConfig, severity: f64, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let sigma = 0.03 * severity.sqrt();
    let mut blobs = Vec::new();
    for (side, lung) in LUNGS.iter().enumerate() {
        // Lateral edge: left lung's left side, right lung's right side.
        let lateral = if side == 0 { -1.0 } else { 1.0 };
        for _ in 0..cfg.covid_blobs_per_lung {
            blobs.push(Blob {
                cx: lung.cx + lateral * rng.gen_range(0.45..0.75) * lung.rx,
                cy: lung.cy + rng.gen_range(0.0..0.75) * lung.ry,
                sigma: sigma * rng.gen_range(0.85..1.15),
                amplitude: 0.28 * rng.gen_range(0.9..1.1),
            });
        }
    }
    blobs
}

/// Axis-aligned bright rectangle placed clear of both lungs.
#[derive(Debug, Clone, Copy)]
struct Marker {
    cx: f64,
    cy: f64,
    hw: f64,
    hh: f64,
    amplitude: f64,
}

impl Marker {
    fn inside(&self, u: f64, v: f64) -> bool {
        (u - self.cx).abs() <= self.hw && (v - self.cy).abs() <= self.hh
    }
}

fn distractors(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Marker> {
    let count = rng.gen_range(0..=cfg.max_distractors);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (hw, hh) = if rng.gen_bool(0.5) {
            let r = rng.gen_range(0.012..0.03);
            (r, r)
        } else {
            (rng.gen_range(0.03..0.08), rng.gen_range(0.006..0.012))
        };
        let m = Marker {
            cx: rng.gen_range(0.05..0.95),
            cy: rng.gen_range(0.05..0.95),
            hw,
            hh,
            amplitude: cfg.distractor_amplitude * rng.gen_range(0.6..1.0),
        };
        let clear = LUNGS.iter().all(|l| {
            let grown = Ellipse {
                rx: l.rx + m.hw + 0.01,
                ry: l.ry + m.hh + 0.01,
                ..*l
            };
            !grown.inside(m.cx, m.cy)
        });
        if clear {
            out.push(m);
        }
    }
    out
}

fn render(
    cfg: &SynthConfig,
    blobs: &[Blob],
    site: usize,
    rng: &mut ChaCha8Rng,
) -> (ImageBuffer, BinaryMask) {
    let side = cfg.side;
    let markers = distractors(cfg, rng);
    let rib_amplitude = rng.gen_range(0.02..0.07);
    let noise = Normal::new(0.0, cfg.noise_sd).expect("finite sd");
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let offset = if cfg.site_brightness_offset {
        site as f64 * SITE_OFFSET_STEP
    } else {
        0.0
    };
    let mut pixels = Vec::with_capacity(side * side);
    let mut lesion = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = normalized(side, y, x);
            let mut value;
            let mut in_lesion = false;
            if let Some(_lung) = lung_index(u, v) {
                value = LUNG_LEVEL
                    + rib_amplitude * (std::f64::consts::TAU * cfg.texture_frequency * v + phase).sin();
                for b in blobs {
                    let d2 = (u - b.cx).powi(2) + (v - b.cy).powi(2);
                    let profile = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                    value += b.amplitude * profile;
                    if profile >= 0.5 {
                        in_lesion = true;
                    }
                }
            } else if BODY.inside(u, v) {
                value = TISSUE_LEVEL;
            } else {
                value = AIR_LEVEL;
            }
            for m in &markers {
                if m.inside(u, v) {
                    value += m.amplitude;
                }
            }
            value += offset + noise.sample(rng);
            pixels.push(value.clamp(0.0, 1.0) as f32);
            lesion.push(in_lesion);
        }
    }
    (
        ImageBuffer::new(side, side, pixels),
        BinaryMask::new(side, side, lesion),
    )
}

/// Multiplier on `48 * severity` for the RALE proxy.
pub fn bilaterality_factor(label: ClassLabel) -> f64 {
    match label {
        ClassLabel::Control => 0.0,
        ClassLabel::NonCovidPneumonia => 0.5,
        ClassLabel::Covid19 => 1.0,
    }
}

pub fn rale_score(label: ClassLabel, severity: f64) -> u8 {
    (48.0 * severity * bilaterality_factor(label)).round().clamp(0.0, 48.0) as u8
}

pub const ICU_SEVERITY: f64 = 0.6;

fn clinical(label: ClassLabel, severity: f64, rng: &mut ChaCha8Rng) -> ClinicalRecord {
    let normal = |mean: f64, sd: f64, rng: &mut ChaCha8Rng| Normal::new(mean, sd).expect("sd").sample(rng);
    let age = (rng.gen_range(25.0..75.0) + 10.0 * severity).round();
    let sex = if rng.gen_bool(0.5) { Sex::M } else { Sex::F };
    let spo2 = (98.0 - 20.0 * severity + normal(0.0, 1.5, rng)).clamp(70.0, 100.0);
    let wbc = match label {
        ClassLabel::Control => normal(7.0, 1.5, rng),
        ClassLabel::NonCovidPneumonia => normal(12.0, 3.0, rng),
        ClassLabel::Covid19 => normal(6.0, 2.0, rng),
    }
    .clamp(1.0, 30.0);
    ClinicalRecord {
        age,
        sex,
        rale: Some(rale_score(label, severity)),
        spo2: Some((spo2 * 10.0).round() / 10.0),
        wbc: Some((wbc * 10.0).round() / 10.0),
        icu: Some(severity > ICU_SEVERITY),
    }
}

pub fn record_id(label: ClassLabel, index: usize) -> String {
    format!("syn-{}-{index:04}", label.as_str())
}

/// Renders one record. `stream` selects the record's private RNG stream.
fn generate_record(cfg: &SynthConfig, label: ClassLabel, index: usize, stream: u64) -> SynthRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let severity = match label {
        ClassLabel::Control => 0.0,
        _ => {
            let (lo, hi) = cfg.severity_range;
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        }
    };
    let site = rng.gen_range(0..cfg.sites);
    let blobs = match label {
        ClassLabel::Control => Vec::new(),
        ClassLabel::NonCovidPneumonia => pneumonia_blobs(cfg, severity, &mut rng),
        ClassLabel::Covid19 => covid_blobs(cfg, severity, &mut rng),
    };
    let (image, lesion_mask) = render(cfg, &blobs, site, &mut rng);
    let clinical = clinical(label, severity, &mut rng);
    let id = record_id(label, index);
    SynthRecord {
        meta: ImageRecord {
            path: PathBuf::from(format!("images/{id}.png")),
            id,
            label,
            split: Split::Train,
            site: format!("site-{site}"),
            clinical: Some(clinical),
        },
        image,
        lesion_mask,
        severity,
    }
}

/// Generates all records and a stratified manifest (paths relative to the
/// export directory).
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(DatasetManifest, Vec<SynthRecord>), SynthError> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.per_class_counts.iter().sum());
    let mut stream = 0u64;
    for label in ClassLabel::ALL {
        for index in 0..cfg.per_class_counts[label.index()] {
            records.push(generate_record(cfg, label, index, stream));
            stream += 1;
        }
    }
    let manifest = DatasetManifest::new(records.iter().map(|r| r.meta.clone()).collect());
    let manifest = if records.len() >= 2 && cfg.per_class_counts.iter().all(|&c| c == 0 || c >= 2) {
        split_stratified(&manifest, cfg.val_fraction, cfg.seed)?
    } else {
        manifest
    };
    for (rec, meta) in records.iter_mut().zip(&manifest.images) {
        rec.meta.split = meta.split;
    }
    Ok((manifest, records))
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

/// Writes `images/*.png`, `masks/*.png` and `manifest.json`; returns the
/// manifest path.
pub fn export(records: &[SynthRecord], out_dir: &Path) -> Result<PathBuf, SynthError> {
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    std::fs::create_dir_all(&images).map_err(io(&images))?;
    std::fs::create_dir_all(&masks).map_err(io(&masks))?;
    for r in records {
        r.image.save_png(&out_dir.join(&r.meta.path))?;
        r.lesion_mask.to_image().save_png(&mask_path(out_dir, r.id()))?;
    }
    let manifest = DatasetManifest::new(records.iter().map(|r| r.meta.clone()).collect());
    let path = out_dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

/// Reads an exported lesion mask back.
pub fn load_lesion_mask(root: &Path, id: &str) -> Result<BinaryMask, SynthError> {
    let img = crate::preprocess::load_image(&mask_path(root, id))?;
    Ok(BinaryMask::from_image(&img))
}

/// Marks grid cells whose lesion coverage is at least `min_fraction`.
pub fn lesion_cells(mask: &BinaryMask, grid: usize, min_fraction: f64) -> Vec<bool> {
    let cell_h = mask.height / grid;
    let cell_w = mask.width / grid;
    let area = (cell_h * cell_w) as f64;
    let mut cells = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut count = 0usize;
            for y in gy * cell_h..(gy + 1) * cell_h {
                for x in gx * cell_w..(gx + 1) * cell_w {
                    count += mask.get(y, x) as usize;
                }
            }
            cells.push(count as f64 / area >= min_fraction);
        }
    }
    cells
}
