use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_index, EmbeddingIndex, RetrievalError};
use crate::dataset::ClassLabel;
use crate::embedder::EmbeddingVector;

pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const INDEX_META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub dim: usize,
    pub metric: String,
    pub model_hash: String,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct Row {
    id: String,
    label: ClassLabel,
    vector: Vec<f32>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `embeddings.jsonl` and `meta.json` into `dir`, vectors as f32.
pub fn save_index(index: &EmbeddingIndex, dir: &Path) -> Result<(), RetrievalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rows_path = dir.join(EMBEDDINGS_FILE);
    let file = fs::File::create(&rows_path).map_err(io_err(&rows_path))?;
    let mut out = BufWriter::new(file);
    for i in 0..index.len() {
        let row = Row {
            id: index.ids()[i].clone(),
            label: index.labels()[i],
            vector: index.row(i).iter().map(|&v| v as f32).collect(),
        };
        let line = serde_json::to_string(&row).expect("row serializes");
        writeln!(out, "{line}").map_err(io_err(&rows_path))?;
    }
    out.flush().map_err(io_err(&rows_path))?;

    let meta = IndexMeta {
        dim: index.dim(),
        metric: "cosine".into(),
        model_hash: index.model_hash().to_string(),
        count: index.len(),
    };
    let meta_path = dir.join(INDEX_META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(io_err(&meta_path))
}

/// Reads an index written by [`save_index`]. With `expected_hash` set, an
/// index built by a different model is rejected.
pub fn load_index(dir: &Path, expected_hash: Option<&str>) -> Result<EmbeddingIndex, RetrievalError> {
    let meta_path = dir.join(INDEX_META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: IndexMeta =
        serde_json::from_str(&text).map_err(|e| RetrievalError::Schema(format!("{}: {e}", meta_path.display())))?;
    if meta.metric != "cosine" {
        return Err(RetrievalError::Schema(format!("unsupported metric `{}`", meta.metric)));
    }
    if let Some(expected) = expected_hash {
        if meta.model_hash != expected {
            return Err(RetrievalError::HashMismatch {
                expected: expected.to_string(),
                found: meta.model_hash,
            });
        }
    }

    let rows_path = dir.join(EMBEDDINGS_FILE);
    let file = fs::File::open(&rows_path).map_err(io_err(&rows_path))?;
    let mut embeddings = Vec::with_capacity(meta.count);
    let mut ids = Vec::with_capacity(meta.count);
    let mut labels = Vec::with_capacity(meta.count);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&rows_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row =
            serde_json::from_str(&line).map_err(|e| RetrievalError::Schema(format!("line {}: {e}", n + 1)))?;
        if row.vector.len() != meta.dim {
            return Err(RetrievalError::Schema(format!(
                "row `{}` has {} values, meta says dim {}",
                row.id,
                row.vector.len(),
                meta.dim
            )));
        }
        embeddings.push(EmbeddingVector(row.vector.into_iter().map(f64::from).collect()));
        ids.push(row.id);
        labels.push(row.label);
    }
    if ids.len() != meta.count {
        return Err(RetrievalError::Schema(format!(
            "{} rows present, meta says {}",
            ids.len(),
            meta.count
        )));
    }
    build_index(embeddings, ids, labels, meta.model_hash)
}
