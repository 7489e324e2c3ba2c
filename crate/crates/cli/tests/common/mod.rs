#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use layertour::config::PipelineConfig;
use layertour::demo::{demo_layers, DemoLayersConfig};
use layertour_core::synthetic::LayerStackConfig;

/// Two small synthetic models (3 and 2 layers) and a fast pipeline config.
pub fn small_demo(dir: &Path, seed: u64) -> PipelineConfig {
    let demo = DemoLayersConfig {
        stack: LayerStackConfig {
            n: 150,
            p: 32,
            layers: 3,
            clusters: 3,
            seed,
            ..Default::default()
        },
        second_model_layers: 2,
        target_dims: 16,
        embedding_dim: 4,
    };
    let path = demo_layers(dir, &demo).unwrap();
    let mut cfg = PipelineConfig::load(&path).unwrap();
    cfg.embed.n_epochs = Some(60);
    cfg
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
