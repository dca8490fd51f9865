//! HTTP routes. Bodies are JSON; errors are `{"code", "message"}` with a matching status.
//!
//! | route | body | response |
//! |---|---|---|
//! | `GET /images` | | `{"images": [ImageInfo]}` |
//! | `GET /images/{id}` | | original file bytes |
//! | `GET /images/{id}/thumb` | | PNG thumbnail |
//! | `POST /annotations` | `NewAnnotation` | `201`, `AnnotationView` |
//! | `GET /annotations?image=` | | `{"annotations": [AnnotationView]}` |
//! | `POST /annotations/{id}/sample` | `{"step", "dims": [w, h]}` | `{"id", "rects": [Rect]}` |
//! | `POST /export` | optional `{"path"}` | `ExportSummary` |

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vinebud::Rect;

use crate::error::{Result, ServiceError};
use crate::export::{export, ExportSummary};
use crate::store::{AnnotationView, NewAnnotation, Sampling};
use crate::AppState;

const IMMUTABLE: &str = "public, max-age=31536000, immutable";

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(image_bytes))
        .route("/images/{id}/thumb", get(thumbnail))
        .route("/annotations", post(post_annotation).get(list_annotations))
        .route("/annotations/{id}/sample", post(sample))
        .route("/export", post(export_corpus))
        .fallback(|| async { ServiceError::NotFound("no such endpoint".into()) })
        .with_state(state)
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))?
}

#[derive(Serialize)]
struct ImageList {
    images: Vec<crate::catalog::ImageInfo>,
}

async fn list_images(State(s): State<Arc<AppState>>) -> Json<ImageList> {
    Json(ImageList { images: s.catalog.list() })
}

fn content_type(file: &str) -> &'static str {
    let lower = file.to_ascii_lowercase();
    if lower.ends_with(".png") { "image/png" } else { "image/jpeg" }
}

async fn image_bytes(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let file = s.catalog.get(&id)?.file.clone();
    let bytes = blocking({
        let s = s.clone();
        move || s.catalog.bytes(&id)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, content_type(&file)), (header::CACHE_CONTROL, IMMUTABLE)], bytes).into_response())
}

async fn thumbnail(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    s.catalog.get(&id)?;
    let png = blocking({
        let s = s.clone();
        move || s.catalog.thumbnail(&id)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, IMMUTABLE)], png.as_ref().clone()).into_response())
}

async fn post_annotation(State(s): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<AnnotationView>)> {
    let new: NewAnnotation = parse(&body)?;
    let info = s
        .catalog
        .get(&new.image)
        .map_err(|_| ServiceError::Validation(format!("unknown image {:?}", new.image)))?;
    let dims = (info.width, info.height);
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let view = s.store.write().unwrap().post(new, dims, now)?;
    Ok((StatusCode::CREATED, Json(view)))
}

#[derive(Deserialize)]
struct AnnotationQuery {
    image: Option<String>,
}

#[derive(Serialize)]
struct AnnotationList {
    annotations: Vec<AnnotationView>,
}

async fn list_annotations(State(s): State<Arc<AppState>>, Query(q): Query<AnnotationQuery>) -> Result<Json<AnnotationList>> {
    if let Some(id) = &q.image {
        s.catalog.get(id)?;
    }
    let annotations = s.store.read().unwrap().list(q.image.as_deref());
    Ok(Json(AnnotationList { annotations }))
}

#[derive(Serialize)]
struct SampleResponse {
    id: String,
    rects: Vec<Rect>,
}

async fn sample(State(s): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Json<SampleResponse>> {
    let sampling: Sampling = parse(&body)?;
    let rects = s.store.write().unwrap().sample(&id, sampling)?;
    Ok(Json(SampleResponse { id, rects }))
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportRequest {
    path: Option<PathBuf>,
}

async fn export_corpus(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<ExportSummary>> {
    let req: ExportRequest = if body.iter().all(u8::is_ascii_whitespace) { ExportRequest::default() } else { parse(&body)? };
    let out = req.path.unwrap_or_else(|| s.catalog.root().to_path_buf());
    // consistent snapshot: writers wait only while the records are cloned
    let entries = s.store.read().unwrap().entries().to_vec();
    let summary = blocking(move || export(&s.catalog.list(), s.catalog.root(), &out, &entries)).await?;
    Ok(Json(summary))
}
