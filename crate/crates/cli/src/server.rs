//! Read-only HTTP access to a bundle.
//!
//! | route | body |
//! |---|---|
//! | `GET /api/manifest` | bundle manifest JSON |
//! | `GET /api/losses` | per-layer final losses |
//! | `GET /api/layers/{model}/{layer}` | embedding blob, little-endian f32, `n·d` values |
//! | `GET /api/alignments/{ma}/{la}/{mb}/{lb}` | transform mapping `(ma, la)` onto `(mb, lb)`, metadata in `x-alignment-*` headers |
//! | `GET /api/similarity/{kind}[?model=m]` | similarity matrix JSON |
//! | `GET /` and other paths | viewer files from the static directory |
//!
//! Unknown paths get a 404 with a JSON `{"error": ...}` body.

use std::net::SocketAddr;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use layertour_core::alignment::AlignmentSidecar;
use layertour_core::similarity::IndexKind;
use serde::Deserialize;
use tokio::net::TcpListener;

use crate::bundle::{read_json, similarity_path, Bundle, MANIFEST_FILE};
use crate::error::{PipelineError, Result};

const JSON: &str = "application/json";
const BINARY: &str = "application/octet-stream";

const PLACEHOLDER: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>layertour</title></head>\n\
<body><p>No viewer files are installed. The bundle API is served under <code>/api/</code>.</p></body></html>\n";

struct ServerState {
    bundle: Bundle,
    static_dir: Option<PathBuf>,
}

type Shared = Arc<ServerState>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    let body = serde_json::json!({ "error": message.into() }).to_string();
    (status, [(header::CONTENT_TYPE, JSON)], body).into_response()
}

fn not_found(what: impl Into<String>) -> Response {
    error(StatusCode::NOT_FOUND, what)
}

async fn read_bundle_file(state: &ServerState, rel: &str) -> std::result::Result<Vec<u8>, Response> {
    tokio::fs::read(state.bundle.path(rel))
        .await
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, format!("{rel}: {e}")))
}

fn bytes_response(content_type: &'static str, bytes: Vec<u8>, extra: HeaderMap) -> Response {
    let mut response = Response::new(Body::from(bytes));
    let headers = response.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    headers.extend(extra);
    response
}

async fn manifest(State(state): State<Shared>) -> Response {
    match read_bundle_file(&state, MANIFEST_FILE).await {
        Ok(bytes) => bytes_response(JSON, bytes, HeaderMap::new()),
        Err(r) => r,
    }
}

async fn losses(State(state): State<Shared>) -> Response {
    let rel = state.bundle.manifest.losses.clone();
    match read_bundle_file(&state, &rel).await {
        Ok(bytes) => bytes_response(JSON, bytes, HeaderMap::new()),
        Err(r) => r,
    }
}

fn header_pairs(pairs: Vec<(&'static str, String)>) -> HeaderMap {
    let mut map = HeaderMap::new();
    for (name, value) in pairs {
        if let Ok(v) = HeaderValue::from_str(&value) {
            map.insert(HeaderName::from_static(name), v);
        }
    }
    map
}

async fn layer(State(state): State<Shared>, Path((model, layer)): Path<(String, String)>) -> Response {
    let Some(entry) = state.bundle.manifest.layer(&model, &layer) else {
        return not_found(format!("no layer {model}/{layer}"));
    };
    let m = &state.bundle.manifest;
    let headers = header_pairs(vec![("x-layer-n", m.n.to_string()), ("x-layer-d", m.d.to_string())]);
    match read_bundle_file(&state, &entry.file).await {
        Ok(bytes) => bytes_response(BINARY, bytes, headers),
        Err(r) => r,
    }
}

/// Transposes a row-major `rows × cols` matrix of 4-byte values.
fn transpose_blob(bytes: &[u8], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = vec![0u8; bytes.len()];
    for i in 0..rows {
        for j in 0..cols {
            let src = 4 * (i * cols + j);
            let dst = 4 * (j * rows + i);
            out[dst..dst + 4].copy_from_slice(&bytes[src..src + 4]);
        }
    }
    out
}

async fn alignment(
    State(state): State<Shared>,
    Path((ma, la, mb, lb)): Path<(String, String, String, String)>,
) -> Response {
    let m = &state.bundle.manifest;
    let (entry, reversed) = match (m.alignment((&ma, &la), (&mb, &lb)), m.alignment((&mb, &lb), (&ma, &la))) {
        (Some(e), _) => (e, false),
        (None, Some(e)) => (e, true),
        (None, None) => return not_found(format!("no alignment between {ma}/{la} and {mb}/{lb}")),
    };
    let sidecar: AlignmentSidecar = match read_json(&state.bundle.path(&entry.sidecar)) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let mut bytes = match read_bundle_file(&state, &entry.file).await {
        Ok(b) => b,
        Err(r) => return r,
    };
    let (mut rows, mut cols) = (sidecar.rows, sidecar.cols);
    if reversed {
        bytes = transpose_blob(&bytes, rows, cols);
        std::mem::swap(&mut rows, &mut cols);
    }
    let headers = header_pairs(vec![
        ("x-alignment-kind", sidecar.kind.to_string()),
        ("x-alignment-score", sidecar.score.map(|s| s.to_string()).unwrap_or_else(|| "null".into())),
        ("x-alignment-scale", sidecar.scale.to_string()),
        ("x-alignment-rows", rows.to_string()),
        ("x-alignment-cols", cols.to_string()),
        ("x-alignment-source", format!("{ma}/{la}")),
        ("x-alignment-target", format!("{mb}/{lb}")),
        ("x-alignment-subsampled", sidecar.subsampled.to_string()),
        ("x-alignment-non-unique", sidecar.non_unique.to_string()),
        ("x-alignment-reversed", reversed.to_string()),
    ]);
    bytes_response(BINARY, bytes, headers)
}

#[derive(Deserialize)]
struct SimilarityQuery {
    model: Option<String>,
}

async fn similarity(
    State(state): State<Shared>,
    Path(kind): Path<String>,
    Query(query): Query<SimilarityQuery>,
) -> Response {
    let Ok(kind) = kind.parse::<IndexKind>() else {
        return not_found(format!("unknown similarity kind {kind:?}"));
    };
    let rel = similarity_path(kind, query.model.as_deref());
    if !state.bundle.manifest.similarity.iter().any(|s| s.file == rel) {
        return not_found(format!("bundle has no {rel}"));
    }
    match read_bundle_file(&state, &rel).await {
        Ok(bytes) => bytes_response(JSON, bytes, HeaderMap::new()),
        Err(r) => r,
    }
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => JSON,
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "ico" => "image/x-icon",
        "wasm" => "application/wasm",
        "txt" => "text/plain; charset=utf-8",
        _ => BINARY,
    }
}

/// Viewer files. `/` maps to `index.html`; without a static directory `/`
/// gets a placeholder page.
async fn static_file(State(state): State<Shared>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let Some(dir) = &state.static_dir else {
        return if rel.is_empty() {
            ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], PLACEHOLDER).into_response()
        } else {
            not_found("no such file")
        };
    };
    let rel = if rel.is_empty() || rel.ends_with('/') { format!("{rel}index.html") } else { rel.to_string() };
    let safe = FsPath::new(&rel)
        .components()
        .all(|c| matches!(c, Component::Normal(_)));
    if !safe {
        return not_found("no such file");
    }
    let path = dir.join(&rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => bytes_response(content_type(&path), bytes, HeaderMap::new()),
        Err(_) => not_found("no such file"),
    }
}

async fn api_not_found() -> Response {
    not_found("unknown API path")
}

/// The application router over an already validated bundle.
pub fn router(bundle: Bundle, static_dir: Option<&FsPath>) -> Router {
    let state = Arc::new(ServerState {
        bundle,
        static_dir: static_dir.map(FsPath::to_path_buf),
    });
    let api = Router::new()
        .route("/manifest", get(manifest))
        .route("/losses", get(losses))
        .route("/layers/{model}/{layer}", get(layer))
        .route("/alignments/{ma}/{la}/{mb}/{lb}", get(alignment))
        .route("/similarity/{kind}", get(similarity))
        .fallback(api_not_found);
    Router::new()
        .nest("/api", api)
        .fallback(get(static_file))
        .with_state(state)
}

/// Validates the bundle and binds the listener; the bundle is checked first
/// so an invalid bundle never opens a port.
pub async fn bind(bundle_dir: &FsPath, addr: &str, static_dir: Option<&FsPath>) -> Result<(TcpListener, Router)> {
    let bundle = Bundle::open(bundle_dir)?;
    if let Some(dir) = static_dir {
        if !dir.is_dir() {
            return Err(PipelineError::Config(format!("static directory {} does not exist", dir.display())));
        }
    }
    let listener = TcpListener::bind(addr).await.map_err(|source| PipelineError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    Ok((listener, router(bundle, static_dir)))
}

pub async fn serve_bundle(bundle_dir: PathBuf, host: &str, port: u16, static_dir: Option<PathBuf>) -> Result<()> {
    let addr = format!("{host}:{port}");
    let (listener, app) = bind(&bundle_dir, &addr, static_dir.as_deref()).await?;
    let local: SocketAddr = listener.local_addr().map_err(|source| PipelineError::Bind { addr, source })?;
    log::info!("serving {} on http://{local}", bundle_dir.display());
    axum::serve(listener, app)
        .await
        .map_err(|e| PipelineError::io(bundle_dir, e))
}

#[cfg(test)]
mod tests {
    use super::transpose_blob;

    #[test]
    fn blob_transpose() {
        let m: Vec<u8> = [1f32, 2., 3., 4., 5., 6.].iter().flat_map(|v| v.to_le_bytes()).collect();
        let t: Vec<u8> = [1f32, 4., 2., 5., 3., 6.].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(transpose_blob(&m, 2, 3), t);
        assert_eq!(transpose_blob(&t, 3, 2), m);
    }
}
