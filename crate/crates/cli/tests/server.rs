mod common;

use std::io::{Read, Write};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::small_demo;
use http_body_util::BodyExt;
use layertour::bundle::Bundle;
use layertour::pipeline::run_pipeline;
use layertour::server::{bind, router};
use layertour::PipelineError;
use tower::ServiceExt;

struct Reply {
    status: StatusCode,
    content_type: String,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

async fn get(app: &Router, uri: &str) -> Reply {
    let response = app
        .clone()
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = response.status();
    let headers = response.headers().clone();
    let content_type = headers
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let body = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, content_type, headers, body }
}

fn build(seed: u64) -> (tempfile::TempDir, Bundle) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_demo(tmp.path(), seed);
    let (bundle, _) = run_pipeline(&cfg).unwrap();
    (tmp, bundle)
}

#[tokio::test]
async fn endpoints_serve_on_disk_bytes() {
    let (_tmp, bundle) = build(11);
    let app = router(bundle.clone(), None);
    let m = &bundle.manifest;

    let r = get(&app, "/api/manifest").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type, "application/json");
    assert_eq!(r.body, std::fs::read(bundle.path("manifest.json")).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&r.body).unwrap();
    let layers: usize = json["models"].as_array().unwrap().iter().map(|m| m["layers"].as_array().unwrap().len()).sum();
    assert_eq!(layers, 5);

    for model in &m.models {
        for layer in &model.layers {
            let r = get(&app, &format!("/api/layers/{}/{}", model.name, layer.id)).await;
            assert_eq!(r.status, StatusCode::OK);
            assert_eq!(r.content_type, "application/octet-stream");
            assert_eq!(r.body.len(), m.n * m.d * 4);
            assert_eq!(r.body, std::fs::read(bundle.path(&layer.file)).unwrap());
        }
    }

    for a in &m.alignments {
        let uri = format!("/api/alignments/{}/{}/{}/{}", a.source_model, a.source_layer, a.target_model, a.target_layer);
        let r = get(&app, &uri).await;
        assert_eq!(r.status, StatusCode::OK);
        assert_eq!(r.body, std::fs::read(bundle.path(&a.file)).unwrap());
        assert_eq!(r.headers["x-alignment-kind"], "procrustes");
        assert_eq!(r.headers["x-alignment-reversed"], "false");
        assert_eq!(r.headers["x-alignment-rows"], m.d.to_string().as_str());
    }

    for s in &m.similarity {
        let uri = match s.row_model == s.col_model && m.models.len() == 2 {
            true => format!("/api/similarity/{}?model={}", s.kind, s.row_model),
            false => format!("/api/similarity/{}", s.kind),
        };
        let r = get(&app, &uri).await;
        assert_eq!(r.status, StatusCode::OK, "{uri}");
        assert_eq!(r.content_type, "application/json");
        assert_eq!(r.body, std::fs::read(bundle.path(&s.file)).unwrap());
    }

    let r = get(&app, "/api/losses").await;
    assert_eq!(r.status, StatusCode::OK);
    let losses: serde_json::Value = serde_json::from_slice(&r.body).unwrap();
    assert!(losses["alpha"]["layer0"].as_f64().unwrap() > 0.0);
}

#[tokio::test]
async fn reverse_alignment_is_the_transpose() {
    let (_tmp, bundle) = build(12);
    let app = router(bundle.clone(), None);
    let forward = get(&app, "/api/alignments/alpha/layer1/alpha/layer0").await;
    let reverse = get(&app, "/api/alignments/alpha/layer0/alpha/layer1").await;
    assert_eq!(reverse.status, StatusCode::OK);
    assert_eq!(reverse.headers["x-alignment-reversed"], "true");
    let f: Vec<f32> = forward.body.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let r: Vec<f32> = reverse.body.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let d = bundle.manifest.d;
    for i in 0..d {
        for j in 0..d {
            assert_eq!(f[i * d + j].to_bits(), r[j * d + i].to_bits());
        }
    }
}

#[tokio::test]
async fn unknown_paths_are_json_404s() {
    let (tmp, bundle) = build(13);
    let app = router(bundle, None);
    for uri in [
        "/api/layers/alpha/unknown",
        "/api/layers/nope/layer0",
        "/api/alignments/alpha/layer0/alpha/layer2",
        "/api/similarity/rbf",
        "/api/similarity/procrustes?model=gamma",
        "/api/nothing",
        "/missing.js",
    ] {
        let r = get(&app, uri).await;
        assert_eq!(r.status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(r.content_type, "application/json", "{uri}");
        let json: serde_json::Value = serde_json::from_slice(&r.body).unwrap();
        assert!(json["error"].is_string());
    }
    let r = get(&app, "/").await;
    assert_eq!(r.status, StatusCode::OK);
    assert!(r.content_type.starts_with("text/html"));

    // Static viewer files.
    let site = tmp.path().join("site");
    std::fs::create_dir_all(site.join("js")).unwrap();
    std::fs::write(site.join("index.html"), "<p>viewer</p>").unwrap();
    std::fs::write(site.join("js/app.js"), "console.log(1)").unwrap();
    let bundle = Bundle::open(tmp.path().join("bundle")).unwrap();
    let app = router(bundle, Some(&site));
    let r = get(&app, "/").await;
    assert_eq!(r.body, b"<p>viewer</p>");
    assert!(r.content_type.starts_with("text/html"));
    let r = get(&app, "/js/app.js").await;
    assert!(r.content_type.starts_with("text/javascript"));
    let r = get(&app, "/../bundle/manifest.json").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_bundle_refuses_to_start() {
    let (tmp, bundle) = build(14);
    let first = bundle.path(&bundle.manifest.alignments[0].file);
    std::fs::write(&first, b"short").unwrap();
    match bind(&tmp.path().join("bundle"), "127.0.0.1:0", None).await {
        Err(PipelineError::InvalidBundle(problems)) => assert!(!problems.is_empty()),
        other => panic!("expected a validation failure, got {:?}", other.map(|_| ())),
    }
}

#[tokio::test]
async fn port_conflict_is_a_startup_error() {
    let (tmp, _) = build(15);
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let result = bind(&tmp.path().join("bundle"), &addr, None).await;
    assert!(matches!(result, Err(PipelineError::Bind { .. })));
}

fn raw_get(addr: std::net::SocketAddr, path: &str) -> (String, Vec<u8>) {
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    let head = String::from_utf8(raw[..split].to_vec()).unwrap();
    (head, raw[split + 4..].to_vec())
}

#[test]
fn concurrent_socket_requests_return_identical_bytes() {
    let (tmp, bundle) = build(16);
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let (listener, app) = runtime
        .block_on(bind(&tmp.path().join("bundle"), "127.0.0.1:0", None))
        .unwrap();
    let addr = listener.local_addr().unwrap();
    runtime.spawn(async move { axum::serve(listener, app).await.unwrap() });

    let layer = &bundle.manifest.models[1].layers[1];
    let path = format!("/api/layers/beta/{}", layer.id);
    let on_disk = std::fs::read(bundle.path(&layer.file)).unwrap();
    let replies: Vec<(String, Vec<u8>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8).map(|_| s.spawn(|| raw_get(addr, &path))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (head, body) in &replies {
        let head = head.to_ascii_lowercase();
        assert!(head.starts_with("http/1.1 200"));
        assert!(head.contains(&format!("content-length: {}", on_disk.len())));
        assert!(head.contains("content-type: application/octet-stream"));
        assert_eq!(body, &on_disk);
    }
}
