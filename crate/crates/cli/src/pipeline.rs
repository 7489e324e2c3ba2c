//! pool → embed → align → similarity, written into a bundle directory.
//!
//! Every stage output is recorded in `stages.json` under a key hashed from
//! the stage inputs (input file contents, upstream keys and the relevant
//! configuration). A rerun skips any stage whose key is unchanged and whose
//! files still hash to the recorded values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use layertour_core::alignment::procrustes_align_subsampled;
use layertour_core::preprocess::{to_matrix, ActivationMatrix};
use layertour_core::similarity::similarity_matrix;
use layertour_core::store::{load_manifest, DatasetManifest};
use layertour_core::umap::{embed, EmbeddingConfig, EmbeddingMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{
    alignment_stem, check_id, file_entry, layer_blob_path, layer_sidecar_path, read_json, similarity_path,
    to_json_bytes, write_file, AlignmentEntry, Bundle, BundleLayer, BundleManifest, BundleModel, FileEntry,
    LayerSidecar, SimilarityEntry, FORMAT_VERSION, LOSSES_FILE, MANIFEST_FILE,
};
use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::hashing::{file_sha256, stage_key};

pub const STAGES_FILE: &str = "stages.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    files: BTreeMap<String, FileEntry>,
}

/// Which stages ran and which were reused from a previous run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub computed: Vec<String>,
    pub skipped: Vec<String>,
}

impl RunReport {
    fn merge(&mut self, name: String, computed: bool) {
        if computed {
            self.computed.push(name);
        } else {
            self.skipped.push(name);
        }
    }
}

/// Persistent stage log, rewritten after every completed stage so that
/// partial runs can resume.
struct StageLog {
    path: PathBuf,
    dir: PathBuf,
    records: Mutex<BTreeMap<String, StageRecord>>,
}

impl StageLog {
    fn open(dir: &Path) -> Self {
        let path = dir.join(STAGES_FILE);
        let records = read_json(&path).unwrap_or_default();
        StageLog {
            path,
            dir: dir.to_path_buf(),
            records: Mutex::new(records),
        }
    }

    /// True when `name` was completed with `key` and its files are intact.
    fn is_fresh(&self, name: &str, key: &str) -> bool {
        let records = self.records.lock().unwrap();
        let Some(rec) = records.get(name) else {
            return false;
        };
        rec.key == key
            && rec.files.iter().all(|(rel, entry)| {
                std::fs::read(self.dir.join(rel))
                    .map(|bytes| file_entry(&bytes) == *entry)
                    .unwrap_or(false)
            })
    }

    fn complete(&self, name: &str, key: &str, files: &[(String, Vec<u8>)]) -> Result<()> {
        for (rel, bytes) in files {
            write_file(&self.dir, rel, bytes)?;
        }
        let mut records = self.records.lock().unwrap();
        records.insert(
            name.to_string(),
            StageRecord {
                key: key.to_string(),
                files: files.iter().map(|(rel, b)| (rel.clone(), file_entry(b))).collect(),
            },
        );
        std::fs::write(&self.path, to_json_bytes(&*records)).map_err(|e| PipelineError::io(&self.path, e))
    }
}

struct LayerJob<'a> {
    model: &'a DatasetManifest,
    index: usize,
    input_hash: String,
}

impl LayerJob<'_> {
    fn model_name(&self) -> &str {
        &self.model.model_name
    }

    fn layer_id(&self) -> &str {
        &self.model.layers[self.index].id
    }

    fn name(&self) -> String {
        format!("{}/{}", self.model_name(), self.layer_id())
    }
}

fn load_models(cfg: &PipelineConfig) -> Result<Vec<DatasetManifest>> {
    let models: Vec<DatasetManifest> = cfg
        .manifests
        .iter()
        .map(|p| load_manifest(p).map_err(PipelineError::stage("load manifest", p.display().to_string())))
        .collect::<Result<_>>()?;
    for m in &models {
        check_id("model", &m.model_name)?;
        for l in &m.layers {
            check_id("layer", &l.id)?;
        }
    }
    if models.len() == 2 {
        if models[0].model_name == models[1].model_name {
            return Err(PipelineError::Config(format!(
                "both manifests use the model name {:?}",
                models[0].model_name
            )));
        }
        if models[0].n() != models[1].n() {
            return Err(PipelineError::Config(format!(
                "models disagree on the example count: {} vs {}",
                models[0].n(),
                models[1].n()
            )));
        }
    }
    if models[0].n() < 2 {
        return Err(PipelineError::Config("at least two examples are required".into()));
    }
    Ok(models)
}

fn embed_layer(job: &LayerJob, cfg: &PipelineConfig, emb: &EmbeddingConfig) -> Result<(Vec<u8>, LayerSidecar)> {
    let entry = &job.model.layers[job.index];
    let stage = |s| PipelineError::stage(s, job.name());
    let tensor = job.model.load_layer(entry).map_err(stage("load"))?;
    let matrix = to_matrix(&tensor, cfg.target_dims).map_err(stage("pool"))?;
    log::info!("{}: {:?} -> {} features", job.name(), tensor.shape, matrix.p());
    let e = embed(&matrix, emb).map_err(stage("embed"))?.centered();
    let sidecar = LayerSidecar {
        layer_id: entry.id.clone(),
        d: e.d(),
        seed: e.seed,
        final_loss: e.final_loss,
        config: emb.clone(),
        source_shape: tensor.shape.clone(),
        features: matrix.p(),
    };
    Ok((e.to_blob(), sidecar))
}

fn as_matrix(e: &EmbeddingMatrix) -> ActivationMatrix {
    ActivationMatrix {
        layer_id: e.layer_id.clone(),
        values: e.coords.clone(),
        centered: true,
    }
}

/// Runs every stage, reusing fresh outputs, and returns the validated bundle.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(Bundle, RunReport)> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let emb = cfg.embedding()?;
    let models = load_models(cfg)?;
    let n = models[0].n();
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    let log = StageLog::open(&dir);
    let mut report = RunReport::default();

    let emb_json = serde_json::to_string(&emb).expect("config serializes");
    let target_dims = cfg.target_dims.to_string();
    let jobs: Vec<LayerJob> = models
        .iter()
        .flat_map(|m| (0..m.layers.len()).map(move |index| (m, index)))
        .map(|(model, index)| {
            let path = model.layer_path(&model.layers[index]);
            Ok(LayerJob {
                model,
                index,
                input_hash: file_sha256(&path)?,
            })
        })
        .collect::<Result<_>>()?;

    // Embedding, one stage per layer.
    let embed_keys: Vec<String> = jobs
        .iter()
        .map(|j| {
            stage_key(&[
                ("stage", "embed"),
                ("layer", &j.name()),
                ("input", &j.input_hash),
                ("target_dims", &target_dims),
                ("embedding", &emb_json),
            ])
        })
        .collect();
    let outcomes: Vec<bool> = jobs
        .par_iter()
        .zip(&embed_keys)
        .map(|(job, key)| {
            let name = format!("embed:{}", job.name());
            if log.is_fresh(&name, key) {
                return Ok(false);
            }
            let (blob, sidecar) = embed_layer(job, cfg, &emb)?;
            log.complete(
                &name,
                key,
                &[
                    (layer_blob_path(job.model_name(), job.layer_id()), blob),
                    (layer_sidecar_path(job.model_name(), job.layer_id()), to_json_bytes(&sidecar)),
                ],
            )?;
            Ok(true)
        })
        .collect::<Result<_>>()?;
    for (job, computed) in jobs.iter().zip(outcomes) {
        report.merge(format!("embed:{}", job.name()), computed);
    }

    let mut embeddings: BTreeMap<(String, String), (EmbeddingMatrix, LayerSidecar, String)> = BTreeMap::new();
    for (job, key) in jobs.iter().zip(&embed_keys) {
        let (model, layer) = (job.model_name(), job.layer_id());
        let sidecar: LayerSidecar = read_json(&dir.join(layer_sidecar_path(model, layer)))?;
        let blob_path = dir.join(layer_blob_path(model, layer));
        let bytes = std::fs::read(&blob_path).map_err(|e| PipelineError::io(&blob_path, e))?;
        let e = EmbeddingMatrix::from_blob(layer, &bytes, n, sidecar.d)?;
        embeddings.insert((model.to_string(), layer.to_string()), (e, sidecar, key.clone()));
    }
    let get = |model: &str, layer: &str| &embeddings[&(model.to_string(), layer.to_string())];

    // Alignment pairs: (source, target) with the source mapped onto the target.
    let mut pairs: Vec<((String, String), (String, String))> = Vec::new();
    for m in &models {
        let ids: Vec<&String> = m.layers.iter().map(|l| &l.id).collect();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if cfg.all_within_pairs || j == i + 1 {
                    pairs.push(((m.model_name.clone(), ids[j].clone()), (m.model_name.clone(), ids[i].clone())));
                }
            }
        }
    }
    if models.len() == 2 {
        for a in &models[0].layers {
            for b in &models[1].layers {
                pairs.push(((models[1].model_name.clone(), b.id.clone()), (models[0].model_name.clone(), a.id.clone())));
            }
        }
    }
    let mut stems = std::collections::BTreeSet::new();
    for (s, t) in &pairs {
        if !stems.insert(alignment_stem((&s.0, &s.1), (&t.0, &t.1))) {
            return Err(PipelineError::Config(format!(
                "alignment file name for {}/{} -> {}/{} collides with another pair; rename layers",
                s.0, s.1, t.0, t.1
            )));
        }
    }
    let fraction = cfg.subsample_fraction.to_string();
    let seed_str = seed.to_string();
    let outcomes: Vec<bool> = pairs
        .par_iter()
        .map(|(s, t)| {
            let (src, _, src_key) = get(&s.0, &s.1);
            let (tgt, _, tgt_key) = get(&t.0, &t.1);
            let name = format!("align:{}/{}->{}/{}", s.0, s.1, t.0, t.1);
            let key = stage_key(&[
                ("stage", "align"),
                ("source", src_key),
                ("target", tgt_key),
                ("fraction", &fraction),
                ("seed", &seed_str),
            ]);
            if log.is_fresh(&name, &key) {
                return Ok(false);
            }
            let map = procrustes_align_subsampled(&src.coords, &tgt.coords, cfg.subsample_fraction, seed)
                .map_err(PipelineError::stage("align", name.clone()))?
                .with_layers(&s.1, &t.1);
            let stem = alignment_stem((&s.0, &s.1), (&t.0, &t.1));
            log.complete(
                &name,
                &key,
                &[(format!("{stem}.bin"), map.to_blob()), (format!("{stem}.json"), to_json_bytes(&map.sidecar()))],
            )?;
            Ok(true)
        })
        .collect::<Result<_>>()?;
    for ((s, t), computed) in pairs.iter().zip(outcomes) {
        report.merge(format!("align:{}/{}->{}/{}", s.0, s.1, t.0, t.1), computed);
    }

    // Similarity matrices.
    let layers_of = |m: &DatasetManifest| -> Vec<(ActivationMatrix, String)> {
        m.layers
            .iter()
            .map(|l| {
                let (e, _, key) = get(&m.model_name, &l.id);
                (as_matrix(e), key.clone())
            })
            .collect()
    };
    let mut scopes: Vec<(&DatasetManifest, &DatasetManifest, Option<&str>)> = Vec::new();
    if models.len() == 2 {
        scopes.push((&models[0], &models[1], None));
        for m in &models {
            scopes.push((m, m, Some(m.model_name.as_str())));
        }
    } else {
        scopes.push((&models[0], &models[0], None));
    }
    let mut similarity_entries = Vec::new();
    for &kind in &cfg.similarity_kinds {
        for &(rows, cols, within) in &scopes {
            let file = similarity_path(kind, within);
            let name = format!("similarity:{file}");
            let (a, b) = (layers_of(rows), layers_of(cols));
            let upstream: Vec<&str> = a.iter().chain(&b).map(|(_, k)| k.as_str()).collect();
            let key = stage_key(&[
                ("stage", "similarity"),
                ("kind", kind.as_str()),
                ("file", &file),
                ("inputs", &upstream.join(",")),
            ]);
            let computed = if log.is_fresh(&name, &key) {
                false
            } else {
                let xs: Vec<ActivationMatrix> = a.into_iter().map(|(m, _)| m).collect();
                let ys: Vec<ActivationMatrix> = b.into_iter().map(|(m, _)| m).collect();
                let matrix = similarity_matrix(&xs, &ys, kind).map_err(PipelineError::stage("similarity", file.clone()))?;
                log.complete(&name, &key, &[(file.clone(), to_json_bytes(&matrix))])?;
                true
            };
            report.merge(name, computed);
            similarity_entries.push(SimilarityEntry {
                kind,
                row_model: rows.model_name.clone(),
                col_model: cols.model_name.clone(),
                file,
            });
        }
    }

    // Loss report and manifest.
    let losses: BTreeMap<&str, BTreeMap<&str, f64>> = models
        .iter()
        .map(|m| {
            let per_layer = m
                .layers
                .iter()
                .map(|l| (l.id.as_str(), get(&m.model_name, &l.id).1.final_loss))
                .collect();
            (m.model_name.as_str(), per_layer)
        })
        .collect();
    write_file(&dir, LOSSES_FILE, &to_json_bytes(&losses))?;

    let bundle_models: Vec<BundleModel> = models
        .iter()
        .map(|m| BundleModel {
            name: m.model_name.clone(),
            layers: m
                .layers
                .iter()
                .map(|l| {
                    let side = &get(&m.model_name, &l.id).1;
                    BundleLayer {
                        id: l.id.clone(),
                        file: layer_blob_path(&m.model_name, &l.id),
                        sidecar: layer_sidecar_path(&m.model_name, &l.id),
                        source_shape: side.source_shape.clone(),
                        features: side.features,
                        final_loss: side.final_loss,
                    }
                })
                .collect(),
        })
        .collect();
    let alignments: Vec<AlignmentEntry> = pairs
        .iter()
        .map(|(s, t)| {
            let stem = alignment_stem((&s.0, &s.1), (&t.0, &t.1));
            AlignmentEntry {
                source_model: s.0.clone(),
                source_layer: s.1.clone(),
                target_model: t.0.clone(),
                target_layer: t.1.clone(),
                file: format!("{stem}.bin"),
                sidecar: format!("{stem}.json"),
            }
        })
        .collect();

    let mut files = BTreeMap::new();
    let mut index = |rel: &str| -> Result<()> {
        let path = dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        files.insert(rel.to_string(), file_entry(&bytes));
        Ok(())
    };
    for m in &bundle_models {
        for l in &m.layers {
            index(&l.file)?;
            index(&l.sidecar)?;
        }
    }
    for a in &alignments {
        index(&a.file)?;
        index(&a.sidecar)?;
    }
    for s in &similarity_entries {
        index(&s.file)?;
    }
    index(LOSSES_FILE)?;

    let labelled = models.iter().find(|m| m.labels.is_some());
    let d = embeddings.values().next().map(|(e, _, _)| e.d()).unwrap_or(emb.d);
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        n,
        d,
        seed,
        embedding: emb,
        models: bundle_models,
        labels: labelled.and_then(|m| m.labels.clone()),
        label_names: labelled.and_then(|m| m.label_names.clone()),
        alignments,
        similarity: similarity_entries,
        losses: LOSSES_FILE.to_string(),
        files,
    };
    write_file(&dir, MANIFEST_FILE, &to_json_bytes(&manifest))?;
    log::info!(
        "bundle written to {}: {} stages computed, {} skipped",
        dir.display(),
        report.computed.len(),
        report.skipped.len()
    );
    Ok((Bundle::open(&dir)?, report))
}
