//! On-disk bundle: embeddings, alignment maps and similarity matrices plus a
//! manifest indexing them.
//!
//! ```text
//! manifest.json
//! layers/<model>/<layer>.bin          n·d little-endian f32, row-major
//! layers/<model>/<layer>.json         embedding sidecar
//! alignments/<ma>.<la>_<mb>.<lb>.bin  d·d little-endian f32, row-major
//! alignments/<ma>.<la>_<mb>.<lb>.json alignment sidecar
//! similarity/<kind>.json              primary matrix of each kind
//! similarity/<kind>.<model>.json      within-model matrices of a 2-model bundle
//! losses.json                         final UMAP loss per layer
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use layertour_core::alignment::{AlignmentMap, AlignmentSidecar};
use layertour_core::similarity::{IndexKind, SimilarityMatrix};
use layertour_core::umap::EmbeddingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::hashing::sha256_hex;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSSES_FILE: &str = "losses.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub embedding: EmbeddingConfig,
    pub models: Vec<BundleModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<BTreeMap<i64, String>>,
    pub alignments: Vec<AlignmentEntry>,
    pub similarity: Vec<SimilarityEntry>,
    pub losses: String,
    /// Relative path → size and SHA-256 of every data file in the bundle.
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleModel {
    pub name: String,
    pub layers: Vec<BundleLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleLayer {
    pub id: String,
    pub file: String,
    pub sidecar: String,
    /// Shape of the raw activations.
    pub source_shape: Vec<usize>,
    /// Feature count after pooling/flattening.
    pub features: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEntry {
    pub source_model: String,
    pub source_layer: String,
    pub target_model: String,
    pub target_layer: String,
    pub file: String,
    pub sidecar: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub kind: IndexKind,
    pub row_model: String,
    pub col_model: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub bytes: u64,
    pub sha256: String,
}

/// Sidecar stored next to each embedding blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSidecar {
    pub layer_id: String,
    pub d: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub config: EmbeddingConfig,
    pub source_shape: Vec<usize>,
    pub features: usize,
}

/// Model and layer ids become path components, so they are restricted to
/// `[A-Za-z0-9._-]`, must not start with `.` and must be non-empty.
pub fn check_id(kind: &str, id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Config(format!(
            "{kind} id {id:?} is not path-safe (allowed: letters, digits, '.', '_', '-')"
        )))
    }
}

pub fn layer_blob_path(model: &str, layer: &str) -> String {
    format!("layers/{model}/{layer}.bin")
}

pub fn layer_sidecar_path(model: &str, layer: &str) -> String {
    format!("layers/{model}/{layer}.json")
}

pub fn alignment_stem(source: (&str, &str), target: (&str, &str)) -> String {
    format!("alignments/{}.{}_{}.{}", source.0, source.1, target.0, target.1)
}

pub fn similarity_path(kind: IndexKind, within_model: Option<&str>) -> String {
    match within_model {
        Some(m) => format!("similarity/{kind}.{m}.json"),
        None => format!("similarity/{kind}.json"),
    }
}

pub fn file_entry(bytes: &[u8]) -> FileEntry {
    FileEntry {
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    }
}

/// Writes `bytes` to `dir/rel`, creating parent directories.
pub fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| PipelineError::io(&path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::json(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("bundle types serialize");
    bytes.push(b'\n');
    bytes
}

impl BundleManifest {
    pub fn model(&self, name: &str) -> Option<&BundleModel> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn layer(&self, model: &str, layer: &str) -> Option<&BundleLayer> {
        self.model(model)?.layers.iter().find(|l| l.id == layer)
    }

    pub fn alignment(&self, source: (&str, &str), target: (&str, &str)) -> Option<&AlignmentEntry> {
        self.alignments.iter().find(|a| {
            a.source_model == source.0
                && a.source_layer == source.1
                && a.target_model == target.0
                && a.target_layer == target.1
        })
    }

    /// The matrix served for a kind: cross-model when there are two models,
    /// otherwise the single model's matrix.
    pub fn primary_similarity(&self, kind: IndexKind) -> Option<&SimilarityEntry> {
        let path = similarity_path(kind, None);
        self.similarity.iter().find(|s| s.kind == kind && s.file == path)
    }

    pub fn layer_count(&self) -> usize {
        self.models.iter().map(|m| m.layers.len()).sum()
    }
}

/// A bundle whose manifest passed validation.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: BundleManifest,
}

impl Bundle {
    /// Loads and validates; the error lists every problem found.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let manifest: BundleManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let problems = validate(&dir, &manifest);
        if !problems.is_empty() {
            return Err(PipelineError::InvalidBundle(problems));
        }
        Ok(Bundle { dir, manifest })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn similarity_matrix(&self, entry: &SimilarityEntry) -> Result<SimilarityMatrix> {
        read_json(&self.path(&entry.file))
    }

    pub fn alignment_map(&self, entry: &AlignmentEntry) -> Result<AlignmentMap> {
        let sidecar: AlignmentSidecar = read_json(&self.path(&entry.sidecar))?;
        let path = self.path(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        Ok(AlignmentMap::from_blob(&bytes, &sidecar)?)
    }
}

/// Checks every bundle invariant and returns a description of each violation.
pub fn validate(dir: &Path, m: &BundleManifest) -> Vec<String> {
    let mut problems = Vec::new();
    let check_file = |rel: &str, expected_len: Option<u64>, problems: &mut Vec<String>| {
        let Some(entry) = m.files.get(rel) else {
            problems.push(format!("{rel}: missing from the file index"));
            return;
        };
        match std::fs::read(dir.join(rel)) {
            Err(e) => problems.push(format!("{rel}: {e}")),
            Ok(bytes) => {
                if let Some(len) = expected_len {
                    if bytes.len() as u64 != len {
                        problems.push(format!("{rel}: {} bytes, expected {len}", bytes.len()));
                    }
                }
                if file_entry(&bytes) != *entry {
                    problems.push(format!("{rel}: contents do not match the file index"));
                }
            }
        }
    };

    if m.format_version != FORMAT_VERSION {
        problems.push(format!("unsupported format version {}", m.format_version));
    }
    if m.models.is_empty() || m.models.len() > 2 {
        problems.push(format!("expected 1 or 2 models, found {}", m.models.len()));
    }
    if m.n == 0 || m.d == 0 {
        problems.push(format!("degenerate dimensions n = {}, d = {}", m.n, m.d));
    }
    if let Some(labels) = &m.labels {
        if labels.len() != m.n {
            problems.push(format!("labels has length {}, expected {}", labels.len(), m.n));
        }
    }

    let mut names = BTreeSet::new();
    for model in &m.models {
        if check_id("model", &model.name).is_err() || !names.insert(model.name.as_str()) {
            problems.push(format!("invalid or duplicate model name {:?}", model.name));
        }
        let mut ids = BTreeSet::new();
        for layer in &model.layers {
            if check_id("layer", &layer.id).is_err() || !ids.insert(layer.id.as_str()) {
                problems.push(format!("{}: invalid or duplicate layer id {:?}", model.name, layer.id));
            }
            check_file(&layer.file, Some((m.n * m.d * 4) as u64), &mut problems);
            check_file(&layer.sidecar, None, &mut problems);
            if let Ok(side) = read_json::<LayerSidecar>(&dir.join(&layer.sidecar)) {
                if side.d != m.d || side.layer_id != layer.id {
                    problems.push(format!("{}: sidecar disagrees with the manifest", layer.sidecar));
                }
            }
        }
        if model.layers.is_empty() {
            problems.push(format!("model {} has no layers", model.name));
        }
    }

    for a in &m.alignments {
        for (model, layer) in [(&a.source_model, &a.source_layer), (&a.target_model, &a.target_layer)] {
            if m.layer(model, layer).is_none() {
                problems.push(format!("alignment {} references unknown layer {model}/{layer}", a.file));
            }
        }
        check_file(&a.file, Some((m.d * m.d * 4) as u64), &mut problems);
        check_file(&a.sidecar, None, &mut problems);
        match read_json::<AlignmentSidecar>(&dir.join(&a.sidecar)) {
            Ok(side) => {
                if side.rows != m.d || side.cols != m.d {
                    problems.push(format!("{}: transform is {}×{}, expected {}×{}", a.sidecar, side.rows, side.cols, m.d, m.d));
                }
            }
            Err(e) => problems.push(e.to_string()),
        }
    }

    for s in &m.similarity {
        check_file(&s.file, None, &mut problems);
        let (Some(rows), Some(cols)) = (m.model(&s.row_model), m.model(&s.col_model)) else {
            problems.push(format!("{}: references an unknown model", s.file));
            continue;
        };
        match read_json::<SimilarityMatrix>(&dir.join(&s.file)) {
            Ok(matrix) => {
                let row_ids: Vec<&str> = rows.layers.iter().map(|l| l.id.as_str()).collect();
                let col_ids: Vec<&str> = cols.layers.iter().map(|l| l.id.as_str()).collect();
                let shape_ok = matrix.scores.len() == row_ids.len()
                    && matrix.scores.iter().all(|r| r.len() == col_ids.len());
                if matrix.rows != row_ids || matrix.cols != col_ids || !shape_ok {
                    problems.push(format!(
                        "{}: dimensions do not match the layer counts ({}×{})",
                        s.file,
                        row_ids.len(),
                        col_ids.len()
                    ));
                }
                if matrix.index_kind != s.kind {
                    problems.push(format!("{}: holds {} scores", s.file, matrix.index_kind));
                }
            }
            Err(e) => problems.push(e.to_string()),
        }
    }

    check_file(&m.losses, None, &mut problems);
    problems
}
