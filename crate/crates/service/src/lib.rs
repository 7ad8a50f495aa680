//! HTTP annotation and triage service.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/cases/{id}` | image reference, grid rects, annotations, scores, CAM links |
//! | GET | `/cases/{id}/image` | PNG, or PGM with `?format=pgm` |
//! | GET | `/cases/{id}/cam/{patch}` | positive-class heatmap PNG |
//! | GET | `/cases/{id}/annotations` | annotation records in log order |
//! | POST | `/cases/{id}/annotations` | append a click annotation |
//! | GET | `/worklist?order=risk\|mean\|count` | cases by descending score |
//! | POST | `/predict/{id}` | score every patch of the case |
//!
//! Unknown cases are 404, bad bodies 422, grid drift and unusable case data 409, and
//! model-dependent routes answer 503 when no checkpoint is loaded.

pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

pub use store::{
    AnnotationBody, CaseDetail, CaseScores, ImageFormat, Order, ServiceConfig, Status, Store,
    StoreError, WorklistEntry,
};

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let status = match &self {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            StoreError::GridMismatch { .. } => StatusCode::CONFLICT,
            StoreError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
            e if e.is_validation() => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Case { .. } => StatusCode::CONFLICT,
            StoreError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        (
            status,
            Json(serde_json::json!({ "error": self.to_string() })),
        )
            .into_response()
    }
}

type Shared = State<Arc<Store>>;

#[derive(Deserialize)]
struct CaseQuery {
    annotator: Option<String>,
}

#[derive(Deserialize)]
struct ImageQuery {
    format: Option<String>,
}

#[derive(Deserialize)]
struct WorklistQuery {
    #[serde(default)]
    order: Order,
}

/// Runs blocking store work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, StoreError> + Send + 'static,
) -> Result<T, StoreError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| StoreError::Storage(format!("worker failed: {e}")))?
}

async fn case_detail(
    State(store): Shared,
    Path(id): Path<String>,
    Query(q): Query<CaseQuery>,
) -> Result<Json<CaseDetail>, StoreError> {
    blocking(move || store.detail(&id, q.annotator.as_deref()))
        .await
        .map(Json)
}

async fn case_image(
    State(store): Shared,
    Path(id): Path<String>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, StoreError> {
    let format = match q.format.as_deref() {
        None | Some("png") => ImageFormat::Png,
        Some("pgm") => ImageFormat::Pgm,
        Some(other) => {
            return Err(StoreError::Invalid(format!(
                "unknown image format {other:?}"
            )))
        }
    };
    let bytes = blocking(move || store.image_bytes(&id, format)).await?;
    let mime = match format {
        ImageFormat::Png => "image/png",
        ImageFormat::Pgm => "image/x-portable-graymap",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn case_cam(
    State(store): Shared,
    Path((id, patch)): Path<(String, usize)>,
) -> Result<Response, StoreError> {
    let bytes = blocking(move || store.cam_png(&id, patch)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn list_annotations(
    State(store): Shared,
    Path(id): Path<String>,
) -> Result<Json<Vec<lungpatch_core::AnnotationRecord>>, StoreError> {
    store.annotations(&id).map(Json)
}

async fn add_annotation(
    State(store): Shared,
    Path(id): Path<String>,
    Json(body): Json<AnnotationBody>,
) -> Result<Response, StoreError> {
    let rec = blocking(move || store.annotate(&id, body)).await?;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

async fn worklist(
    State(store): Shared,
    Query(q): Query<WorklistQuery>,
) -> Json<Vec<WorklistEntry>> {
    Json(store.worklist(q.order))
}

async fn predict(
    State(store): Shared,
    Path(id): Path<String>,
) -> Result<Json<CaseScores>, StoreError> {
    blocking(move || store.predict(&id)).await.map(Json)
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/cases/{id}", get(case_detail))
        .route("/cases/{id}/image", get(case_image))
        .route("/cases/{id}/cam/{patch}", get(case_cam))
        .route(
            "/cases/{id}/annotations",
            get(list_annotations).post(add_annotation),
        )
        .route("/worklist", get(worklist))
        .route("/predict/{id}", post(predict))
        .with_state(store)
}

pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let store = Store::open(&cfg).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(store))).await
}

/// [`serve`] on a fresh multi-threaded runtime; returns when the server stops.
pub fn serve_blocking(cfg: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    tokio::runtime::Runtime::new()?.block_on(serve(cfg, addr))
}
