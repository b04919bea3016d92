//! Viewer API: the current splat cloud as PLY, and the pose file for reading
//! and wholesale replacement.

use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::Mutex;

use occlusplat::driver::{self, DriverError, PipelineConfig};
use occlusplat::io::{self, PoseFile};

const INDEX: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>occlusplat</title></head>
<body>
<h1>occlusplat viewer API</h1>
<ul>
<li><a href="/api/scene.ply">GET /api/scene.ply</a>: current splat cloud</li>
<li><a href="/api/poses">GET /api/poses</a>: pose file</li>
<li>POST /api/poses: replace the pose file</li>
</ul>
<p>Start the server with <code>--assets DIR</code> to serve a viewer build here.</p>
</body></html>
"#;

struct AppState {
    cfg: PipelineConfig,
    /// Serializes pose-file writes.
    poses: Mutex<()>,
    assets: Option<PathBuf>,
}

type Shared = Arc<AppState>;

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (status, Json(json!({ "code": code, "message": message.into() }))).into_response()
}

fn driver_error(e: DriverError) -> Response {
    match e {
        DriverError::Validation(m) => error(StatusCode::NOT_FOUND, "not_found", m),
        DriverError::Runtime(m) => error(StatusCode::INTERNAL_SERVER_ERROR, "runtime", m),
    }
}

pub fn router(cfg: PipelineConfig, assets: Option<PathBuf>) -> Router {
    let state = Arc::new(AppState {
        cfg,
        poses: Mutex::new(()),
        assets,
    });
    Router::new()
        .route("/api/scene.ply", get(scene_ply))
        .route("/api/poses", get(get_poses).post(post_poses))
        .fallback(get(static_asset))
        .with_state(state)
}

/// Binds and serves until the process is stopped. Prints the bound address
/// on stdout first so callers can use port 0.
pub fn serve(cfg: PipelineConfig, host: &str, port: u16, assets: Option<PathBuf>) -> Result<(), DriverError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| DriverError::Runtime(format!("starting runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| DriverError::Runtime(format!("binding {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| DriverError::Runtime(e.to_string()))?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        axum::serve(listener, router(cfg, assets))
            .await
            .map_err(|e| DriverError::Runtime(format!("server: {e}")))
    })
}

async fn scene_ply(State(st): State<Shared>) -> Response {
    let res = tokio::task::spawn_blocking(move || driver::latest_cloud(&st.cfg).map(|c| io::ply_bytes(&c))).await;
    match res {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Ok(Err(e)) => driver_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "runtime", e.to_string()),
    }
}

async fn get_poses(State(st): State<Shared>) -> Response {
    let _guard = st.poses.lock().await;
    match io::read_poses(&st.cfg.poses) {
        Ok(p) => Json(p).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "runtime", e.to_string()),
    }
}

async fn post_poses(State(st): State<Shared>, body: Bytes) -> Response {
    let text = match std::str::from_utf8(&body) {
        Ok(t) => t,
        Err(_) => return error(StatusCode::BAD_REQUEST, "invalid_poses", "body is not UTF-8"),
    };
    let poses = match PoseFile::from_json(text) {
        Ok(p) => p,
        Err(e) => return error(StatusCode::BAD_REQUEST, "invalid_poses", e.to_string()),
    };
    let _guard = st.poses.lock().await;
    match io::write_poses(&poses, &st.cfg.poses) {
        Ok(()) => Json(poses).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "runtime", e.to_string()),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "wasm" => "application/wasm",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        _ => "application/octet-stream",
    }
}

async fn static_asset(State(st): State<Shared>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let Some(root) = &st.assets else {
        return if rel.is_empty() || rel == "index.html" {
            ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], INDEX).into_response()
        } else {
            error(StatusCode::NOT_FOUND, "not_found", uri.path())
        };
    };
    let rel = Path::new(if rel.is_empty() { "index.html" } else { rel });
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return error(StatusCode::NOT_FOUND, "not_found", uri.path());
    }
    let path = root.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not_found", uri.path()),
    }
}
