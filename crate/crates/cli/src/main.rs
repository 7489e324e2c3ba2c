use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use layertour::bundle::Bundle;
use layertour::config::PipelineConfig;
use layertour::demo::{demo_klein, demo_layers, write_dataset, DemoLayersConfig};
use layertour::pipeline::run_pipeline;
use layertour::report::{similarity_report, ReportFormat};
use layertour::server::serve_bundle;
use layertour_core::alignment::{cka_align, procrustes_align_subsampled};
use layertour_core::preprocess::{to_matrix, ActivationMatrix};
use layertour_core::similarity::{similarity_matrix, IndexKind};
use layertour_core::store::{load_manifest, read_array, ActivationTensor, DatasetManifest};
use layertour_core::synthetic::LayerStackConfig;
use layertour_core::tour::golden_vectors;
use layertour_core::umap::{dimension_sweep, embed};

#[derive(Parser)]
#[command(name = "layertour", version, about = "Layer-wise UMAP embeddings, alignments and Grand Tour bundles")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (file or directory depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sequential optimization for bit-reproducible embeddings.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pool and flatten every layer of a manifest into a new dataset.
    Pool {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Embed layers of a manifest; writes `<layer>.npy` plus a JSON sidecar.
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to these layers.
        #[arg(long)]
        layer: Vec<String>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Align one embedding onto another.
    Align {
        /// Embedding to be mapped (NPY, 2-D).
        #[arg(long)]
        source: PathBuf,
        /// Embedding it is mapped onto (NPY, 2-D).
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "procrustes")]
        kind: String,
        #[arg(long)]
        subsample: Option<f64>,
    },
    /// Similarity matrix between the layers of one or two manifests.
    Similarity {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long, default_value = "cka_linear")]
        kind: IndexKind,
    },
    /// Run the full pipeline into a bundle directory.
    Bundle {
        /// Dataset manifests (replace those of the config).
        #[arg(long)]
        manifest: Vec<PathBuf>,
    },
    /// Serve a bundle over HTTP.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Viewer files served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Write a Klein-bottle dataset for the dimension sweep.
    DemoKlein {
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
    /// Write two synthetic models and a pipeline config for them.
    DemoLayers {
        /// Demo settings (JSON); defaults otherwise.
        #[arg(long)]
        settings: Option<PathBuf>,
    },
    /// Print a bundle's similarity matrix.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "cka_linear")]
        kind: IndexKind,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
    },
    /// Mean final loss per embedding dimension for one layer.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,6,8")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Write golden tour projection vectors for client-side checks.
    TourVectors,
}

struct Session {
    global: Global,
}

impl Session {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.global.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.global.seed {
            cfg.seed = Some(seed);
        }
        if let Some(out) = &self.global.out {
            cfg.out_dir = out.clone();
        }
        if self.global.deterministic {
            cfg.embed.parallel = false;
        }
        Ok(cfg)
    }

    fn seed(&self) -> anyhow::Result<u64> {
        Ok(self.config()?.seed()?)
    }

    fn out(&self) -> anyhow::Result<&Path> {
        match &self.global.out {
            Some(p) => Ok(p),
            None => bail!("--out is required for this command"),
        }
    }

    fn write_or_print(&self, bytes: &[u8]) -> anyhow::Result<()> {
        match &self.global.out {
            Some(path) => std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
            None => {
                use std::io::Write;
                std::io::stdout().write_all(bytes)?;
                Ok(())
            }
        }
    }
}

fn pooled_layers(manifest: &DatasetManifest, target_dims: usize) -> anyhow::Result<Vec<ActivationMatrix>> {
    manifest
        .layers
        .iter()
        .map(|l| {
            let tensor = manifest.load_layer(l)?;
            Ok(to_matrix(&tensor, target_dims).with_context(|| format!("pooling {}", l.id))?)
        })
        .collect()
}

fn read_matrix(path: &Path) -> anyhow::Result<ActivationMatrix> {
    let t = read_array(path)?;
    if t.rank() != 2 {
        bail!("{} must hold a 2-D array, found shape {:?}", path.display(), t.shape);
    }
    Ok(to_matrix(&t, usize::MAX)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Session { global: cli.global };
    match cli.command {
        Command::Pool { manifest } => {
            let cfg = ctx.config()?;
            let m = load_manifest(&manifest)?;
            let tensors = pooled_layers(&m, cfg.target_dims)?
                .into_iter()
                .map(|p| ActivationTensor::new(p.layer_id.clone(), vec![p.n(), p.p()], p.values.iter().copied().collect()))
                .collect::<Result<Vec<_>, _>>()?;
            write_dataset(ctx.out()?, &m.model_name, &tensors, m.labels.clone())?;
        }
        Command::Embed { manifest, layer, dim } => {
            let cfg = ctx.config()?;
            let mut emb = cfg.embedding()?;
            if let Some(d) = dim {
                emb.d = d;
            }
            emb.validate()?;
            let m = load_manifest(&manifest)?;
            let out = ctx.out()?;
            std::fs::create_dir_all(out)?;
            for entry in m.layers.iter().filter(|l| layer.is_empty() || layer.contains(&l.id)) {
                let x = to_matrix(&m.load_layer(entry)?, cfg.target_dims)?;
                let e = embed(&x, &emb).with_context(|| format!("embedding {}", entry.id))?.centered();
                e.save(&emb, &out.join(format!("{}.npy", entry.id)))?;
                log::info!("{}: final loss {:.6}", entry.id, e.final_loss);
            }
        }
        Command::Align { source, target, kind, subsample } => {
            let (x, y) = (read_matrix(&source)?, read_matrix(&target)?);
            let map = match kind.as_str() {
                "procrustes" => procrustes_align_subsampled(&x.values, &y.values, subsample.unwrap_or(1.0), ctx.seed()?)?,
                "cka" => cka_align(&x.values, &y.values)?,
                other => bail!("unknown alignment kind {other:?} (procrustes or cka)"),
            };
            let map = map.with_layers(&x.layer_id, &y.layer_id);
            let out = ctx.out()?;
            std::fs::write(out.with_extension("bin"), map.to_blob())?;
            std::fs::write(out.with_extension("json"), serde_json::to_vec_pretty(&map.sidecar())?)?;
            println!("{} score {:?}", map.kind, map.score);
        }
        Command::Similarity { manifest, against, kind } => {
            let cfg = ctx.config()?;
            let a = pooled_layers(&load_manifest(&manifest)?, cfg.target_dims)?;
            let b = match against {
                Some(path) => pooled_layers(&load_manifest(&path)?, cfg.target_dims)?,
                None => a.clone(),
            };
            let matrix = similarity_matrix(&a, &b, kind)?;
            ctx.write_or_print(&(serde_json::to_string_pretty(&matrix)? + "\n").into_bytes())?;
        }
        Command::Bundle { manifest } => {
            let mut cfg = ctx.config()?;
            if !manifest.is_empty() {
                cfg.manifests = manifest;
            }
            let (bundle, report) = run_pipeline(&cfg)?;
            println!(
                "bundle {}: {} layers, {} stages computed, {} skipped",
                bundle.dir.display(),
                bundle.manifest.layer_count(),
                report.computed.len(),
                report.skipped.len()
            );
        }
        Command::Serve { bundle, host, port, static_dir } => {
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve_bundle(bundle, &host, port, static_dir))?;
        }
        Command::DemoKlein { n } => {
            let m = demo_klein(ctx.out()?, n, ctx.seed()?)?;
            println!("wrote {} ({} points)", ctx.out()?.display(), m.n());
        }
        Command::DemoLayers { settings } => {
            let mut demo: DemoLayersConfig = match settings {
                Some(path) => serde_json::from_slice(&std::fs::read(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?,
                None => DemoLayersConfig::default(),
            };
            demo.stack = LayerStackConfig {
                seed: ctx.seed()?,
                ..demo.stack
            };
            let config = demo_layers(ctx.out()?, &demo)?;
            println!("wrote {}; build it with `layertour bundle --config {}`", config.display(), config.display());
        }
        Command::Report { bundle, kind, format } => {
            let bundle = Bundle::open(bundle)?;
            ctx.write_or_print(similarity_report(&bundle, kind)?.render(format).as_bytes())?;
        }
        Command::Sweep { manifest, layer, dims, seeds } => {
            let cfg = ctx.config()?;
            let m = load_manifest(&manifest)?;
            let entry = match &layer {
                Some(id) => m.layer(id).with_context(|| format!("no layer {id}"))?,
                None => &m.layers[0],
            };
            let x = to_matrix(&m.load_layer(entry)?, cfg.target_dims)?;
            let results = dimension_sweep(&x, &dims, &cfg.embedding()?, seeds)?;
            let rows: Vec<_> = results
                .iter()
                .map(|&(d, loss)| serde_json::json!({ "d": d, "mean_final_loss": loss }))
                .collect();
            ctx.write_or_print(&(serde_json::to_string_pretty(&rows)? + "\n").into_bytes())?;
        }
        Command::TourVectors => {
            let vectors = golden_vectors(ctx.seed()?)?;
            ctx.write_or_print(&(serde_json::to_string_pretty(&vectors)? + "\n").into_bytes())?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
