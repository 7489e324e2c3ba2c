//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with its
//! measurements and wall time, then fails if the criterion or the time budget
//! was missed. Run with `cargo test --test acceptance -- --nocapture`.

mod common;

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::snapshot;
use http_body_util::BodyExt;
use layertour::bundle::{similarity_path, Bundle};
use layertour::config::PipelineConfig;
use layertour::demo::{demo_layers, DemoLayersConfig};
use layertour::pipeline::run_pipeline;
use layertour::server::router;
use layertour_core::alignment::{cka_align, procrustes_align, svd_layer_align};
use layertour_core::linalg::{frobenius, nuclear_norm, orthogonality_error, random_orthogonal};
use layertour_core::preprocess::center_columns;
use layertour_core::similarity::{linear_cka, linear_cka_of, pearson_r, procrustes_similarity};
use layertour_core::synthetic::{klein_bottle, layer_stack, LayerStackConfig};
use layertour_core::tour::{direct_manipulate, new_tour, step};
use layertour_core::umap::layout::{
    attractive_gradient, attractive_loss, repulsive_gradient, repulsive_loss, REPULSION_FLOOR,
};
use layertour_core::umap::{dimension_sweep, embed, EmbeddingConfig};
use nalgebra::DMatrix;
use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

/// Prints the verdict line and fails the test on a miss.
fn verdict(name: &str, budget: Duration, start: Instant, outcome: Result<String, String>) {
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let (ok, detail) = match outcome {
        Ok(d) => (in_time, d),
        Err(d) => (false, d),
    };
    let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), budget.as_secs());
    println!("{} {name}: {detail} [{timing}]", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail} [{timing}]");
}

fn check(cond: bool, detail: String) -> Result<String, String> {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

fn cka(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    linear_cka_of(x, y).unwrap()
}

#[test]
fn similarity_invariance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for &p in &[8usize, 32] {
        for _ in 0..50 {
            let x = random_matrix(200, p, &mut rng);
            let y = random_matrix(200, p, &mut rng) + &x * 0.5;
            let (q1, q2) = (random_orthogonal(p, &mut rng), random_orthogonal(p, &mut rng));
            let (s1, s2) = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
            let (xt, yt) = (x.dot(&q1) * s1, y.dot(&q2) * s2);
            worst = worst.max((cka(&x, &y) - cka(&xt, &yt)).abs());
            let before = procrustes_similarity(&x, &y).unwrap();
            worst = worst.max((before - procrustes_similarity(&xt, &yt).unwrap()).abs());
            trials += 1;
        }
    }
    let x = random_matrix(200, 8, &mut rng);
    let mut diag = Array2::<f64>::eye(8) * 0.1;
    diag[[0, 0]] = 10.0;
    let xd = x.dot(&diag);
    let cka_shift = (cka(&x, &x) - cka(&xd, &x)).abs();
    let proc_shift = (procrustes_similarity(&x, &x).unwrap() - procrustes_similarity(&xd, &x).unwrap()).abs();
    verdict(
        "similarity invariance",
        Duration::from_secs(30),
        start,
        check(
            worst <= 1e-5 && cka_shift > 0.01 && proc_shift > 0.01,
            format!("{trials} trials, max deviation {worst:.2e}; anisotropic shift cka {cka_shift:.3}, procrustes {proc_shift:.3}"),
        ),
    );
}

#[test]
fn procrustes_optimality_and_trace() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_trace = 0.0f64;
    for _ in 0..100 {
        let p = rng.random_range(2..=10);
        let x = random_matrix(50, p, &mut rng);
        let y = x.dot(&random_orthogonal(p, &mut rng)) + random_matrix(50, p, &mut rng) * 0.3;
        let q = procrustes_align(&x, &y).unwrap().transform;
        let best = frobenius(&(x.dot(&q) - &y).view());
        for _ in 0..50 {
            let other = random_orthogonal(p, &mut rng);
            worst_gap = worst_gap.max(best - frobenius(&(x.dot(&other) - &y).view()));
        }
        let tr = y.t().dot(&x).dot(&q).diag().sum();
        let nuc = nuclear_norm(&x.t().dot(&y).view()).unwrap();
        worst_trace = worst_trace.max((tr - nuc).abs() / nuc);
    }
    verdict(
        "procrustes optimality and trace identity",
        Duration::from_secs(60),
        start,
        check(
            worst_gap <= 1e-6 && worst_trace <= 1e-5,
            format!("max excess over sampled Q {worst_gap:.2e}, max relative trace error {worst_trace:.2e}"),
        ),
    );
}

#[test]
fn alignment_constraints() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut ortho, mut unit, mut scaled, mut equiv) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let p = rng.random_range(2..=15);
        let x = random_matrix(60, p, &mut rng);
        let y = random_matrix(60, p, &mut rng);
        let q = procrustes_align(&x, &y).unwrap().transform;
        ortho = ortho.max(orthogonality_error(&q.view()));
        let map = cka_align(&x, &y).unwrap();
        let w = &map.transform;
        unit = unit.max((w.t().dot(w).diag().sum() - 1.0).abs());
        let hat = map.scaled_transform();
        scaled = scaled.max((hat.t().dot(&hat).diag().sum() - p as f64).abs());

        let basis = random_orthogonal(40, &mut rng);
        let xo = basis.slice(s![.., 0..p]).to_owned();
        let layer = random_matrix(p, p, &mut rng);
        let via_data = procrustes_align(&xo, &xo.dot(&layer)).unwrap().transform;
        let via_weights = svd_layer_align(&layer).unwrap().transform;
        equiv = equiv.max(max_abs(&(via_data - via_weights)));
    }
    verdict(
        "alignment constraints",
        Duration::from_secs(10),
        start,
        check(
            ortho <= 1e-5 && unit <= 1e-6 && scaled <= 1e-5 && equiv <= 1e-5,
            format!("orthogonality {ortho:.2e}, unit trace {unit:.2e}, scaled trace {scaled:.2e}, svd equivalence {equiv:.2e}"),
        ),
    );
}

#[test]
fn nuclear_norm_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (r, c) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let m = random_matrix(r, c, &mut rng) * rng.random_range(0.01..100.0);
        let ours = nuclear_norm(&m.view()).unwrap();
        let oracle: f64 = DMatrix::from_fn(r, c, |i, j| m[[i, j]]).singular_values().sum();
        worst = worst.max((ours - oracle).abs() / oracle);
    }
    verdict(
        "nuclear norm oracle",
        Duration::from_secs(30),
        start,
        check(worst <= 1e-8, format!("1000 matrices, max relative error {worst:.2e}")),
    );
}

fn central_difference(f: impl Fn(&[f64]) -> f64, y: &[f64], h: f64) -> Vec<f64> {
    (0..y.len())
        .map(|c| {
            let (mut plus, mut minus) = (y.to_vec(), y.to_vec());
            plus[c] += h;
            minus[c] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

#[test]
fn umap_gradient_check() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 500 {
        let d = rng.random_range(2..=15);
        let a = rng.random_range(0.3..3.0);
        let b = rng.random_range(0.5..1.5);
        let yi: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let yj: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d2: f64 = yi.iter().zip(&yj).map(|(p, q)| (p - q).powi(2)).sum();
        if d2 <= 10.0 * REPULSION_FLOOR {
            continue;
        }
        let fd = central_difference(|y| attractive_loss(y, &yj, a, b), &yi, 1e-6);
        worst = worst.max(relative_error(&attractive_gradient(&yi, &yj, a, b), &fd));
        let fd = central_difference(|y| repulsive_loss(y, &yj, a, b), &yi, 1e-6);
        worst = worst.max(relative_error(&repulsive_gradient(&yi, &yj, a, b), &fd));
        checked += 1;
    }
    verdict(
        "umap gradient check",
        Duration::from_secs(30),
        start,
        check(worst <= 1e-3, format!("{checked} configurations, max relative error {worst:.2e}")),
    );
}

#[test]
fn klein_dimension_sweep() {
    let start = Instant::now();
    let x = klein_bottle(2000, 2.0, 1.0, 0.0, 0).unwrap();
    let sweep = dimension_sweep(&x, &[2, 3, 4, 6, 8], &EmbeddingConfig::default(), 3).unwrap();
    let loss = |d: usize| sweep.iter().find(|(k, _)| *k == d).unwrap().1;
    let strict = loss(2) > loss(3) && loss(3) > loss(4);
    let gain = loss(2) - loss(4);
    let tail = loss(4) - loss(8);
    let plateau = tail >= 0.0 || -tail < 0.1 * gain;
    let listing: Vec<String> = sweep.iter().map(|(d, l)| format!("d{d}={l:.4}")).collect();
    verdict(
        "klein dimension sweep",
        Duration::from_secs(600),
        start,
        check(strict && plateau, format!("{} (2→4 gain {gain:.4}, 4→8 change {:.4})", listing.join(" "), -tail)),
    );
}

fn upper_triangle(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[[i, j]]).collect()
}

#[test]
fn cka_procrustes_correlation() {
    let start = Instant::now();
    let mut rs = Vec::new();
    for seed in 0..3u64 {
        let layers = layer_stack(&LayerStackConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let centered: Vec<_> = layers.iter().map(center_columns).collect();
        let embeddings: Vec<Array2<f64>> = layers
            .iter()
            .map(|l| {
                let cfg = EmbeddingConfig {
                    seed,
                    ..EmbeddingConfig::default()
                };
                embed(l, &cfg).unwrap().centered().coords.mapv(f64::from)
            })
            .collect();
        let k = layers.len();
        let mut cka_m = Array2::<f64>::zeros((k, k));
        let mut proc_m = Array2::<f64>::zeros((k, k));
        for i in 0..k {
            for j in i + 1..k {
                cka_m[[i, j]] = linear_cka(&centered[i], &centered[j]).unwrap();
                proc_m[[i, j]] = procrustes_similarity(&embeddings[i], &embeddings[j]).unwrap();
            }
        }
        rs.push(pearson_r(&upper_triangle(&cka_m), &upper_triangle(&proc_m)).unwrap());
    }
    let passing = rs.iter().filter(|&&r| r >= 0.8).count();
    verdict(
        "cka vs procrustes correlation",
        Duration::from_secs(900),
        start,
        check(passing >= 2, format!("pearson r per seed {rs:.3?}, {passing}/3 ≥ 0.8")),
    );
}

#[test]
fn grand_tour_drift_and_manipulation() {
    let start = Instant::now();
    let mut state = new_tour(15, 7).unwrap();
    let mut drift = 0.0f64;
    for _ in 0..10_000 {
        state = step(&state, 1.0 / 60.0).unwrap();
        drift = drift.max(orthogonality_error(&state.gt.view()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_matrix(300, 15, &mut rng) * 3.0;
    let (mut manip_drift, mut worst_ratio) = (0.0f64, f64::INFINITY);
    for _ in 0..1000 {
        state = step(&state, rng.random_range(0.0..0.1)).unwrap();
        let size = rng.random_range(1..=30);
        let selected: Vec<usize> = (0..size).map(|_| rng.random_range(0..x.nrows())).collect();
        let centroid = x.select(Axis(0), &selected).mean_axis(Axis(0)).unwrap();
        let c_norm = centroid.dot(&centroid).sqrt();
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let length = rng.random_range(0.001..=0.1) * c_norm;
        let drag = (length * angle.cos(), length * angle.sin());
        let before = centroid.dot(&state.gt.slice(s![.., 0..2]));
        let target = [before[0] + drag.0, before[1] + drag.1];
        state = direct_manipulate(&state, &x, &selected, drag).unwrap();
        let after = centroid.dot(&state.gt.slice(s![.., 0..2]));
        let remaining = ((after[0] - target[0]).powi(2) + (after[1] - target[1]).powi(2)).sqrt();
        worst_ratio = worst_ratio.min((length - remaining) / length);
        manip_drift = manip_drift.max(orthogonality_error(&state.gt.view()));
    }
    verdict(
        "grand tour drift and manipulation",
        Duration::from_secs(30),
        start,
        check(
            drift <= 1e-5 && manip_drift <= 1e-5 && worst_ratio >= 0.25,
            format!(
                "step drift {drift:.2e}, manipulation drift {manip_drift:.2e}, min distance reduction {:.1}% of drag",
                100.0 * worst_ratio
            ),
        ),
    );
}

async fn fetch(app: &axum::Router, uri: &str) -> (StatusCode, Vec<u8>) {
    let response = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
    let status = response.status();
    (status, response.into_body().collect().await.unwrap().to_bytes().to_vec())
}

/// Every endpoint against the file it serves; returns the number checked.
async fn served_bytes_match(bundle: &Bundle) -> Result<usize, String> {
    let app = router(bundle.clone(), None);
    let m = &bundle.manifest;
    let mut pairs: Vec<(String, String)> = vec![
        ("/api/manifest".into(), "manifest.json".into()),
        ("/api/losses".into(), m.losses.clone()),
    ];
    for model in &m.models {
        for layer in &model.layers {
            pairs.push((format!("/api/layers/{}/{}", model.name, layer.id), layer.file.clone()));
        }
    }
    for a in &m.alignments {
        let uri = format!("/api/alignments/{}/{}/{}/{}", a.source_model, a.source_layer, a.target_model, a.target_layer);
        pairs.push((uri, a.file.clone()));
    }
    for e in &m.similarity {
        let uri = if e.file == similarity_path(e.kind, None) {
            format!("/api/similarity/{}", e.kind)
        } else {
            format!("/api/similarity/{}?model={}", e.kind, e.row_model)
        };
        pairs.push((uri, e.file.clone()));
    }
    for (uri, rel) in &pairs {
        let (status, body) = fetch(&app, uri).await;
        let disk = std::fs::read(bundle.path(rel)).map_err(|e| format!("{rel}: {e}"))?;
        if status != StatusCode::OK || body != disk {
            return Err(format!("{uri} does not match {rel} (status {status})"));
        }
    }
    Ok(pairs.len())
}

fn build_default_demo(dir: &std::path::Path) -> Bundle {
    let config = demo_layers(dir, &DemoLayersConfig::default()).unwrap();
    let mut cfg = PipelineConfig::load(&config).unwrap();
    cfg.seed = Some(0);
    run_pipeline(&cfg).unwrap().0
}

#[test]
fn pipeline_determinism_and_serving() {
    let start = Instant::now();
    let (first, second) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = build_default_demo(first.path());
    let first_run = start.elapsed();
    let b = build_default_demo(second.path());
    let files_a = snapshot(&a.dir);
    let files_b = snapshot(&b.dir);
    let identical = files_a == files_b;
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let served = runtime.block_on(served_bytes_match(&a));
    let layers = a.manifest.models.iter().map(|m| m.layers.len()).sum::<usize>();
    let outcome = match served {
        Ok(count) => check(
            identical && first_run <= Duration::from_secs(1200),
            format!(
                "{} models, {layers} layers, {} files, byte-identical {identical}, {count} endpoints bit-exact, one run {:.1}s",
                a.manifest.models.len(),
                files_a.len(),
                first_run.as_secs_f64()
            ),
        ),
        Err(e) => Err(e),
    };
    verdict("pipeline determinism and serving", Duration::from_secs(2400), start, outcome);
}
