//! REST endpoints over a [`ProjectStore`].
//!
//! | method | path                                   | body / query                 | success |
//! |--------|----------------------------------------|------------------------------|---------|
//! | POST   | `/projects`                            | multipart: `audio`, `alignment`, `embeddings`, `model`, optional `stats` | 201 `{"id"}` |
//! | GET    | `/projects/{id}/analysis`              |                              | 200 analysis document |
//! | POST   | `/projects/{id}/generate`              | [`GenerateRequest`] JSON     | 201 `{"rendition", "contour"}` |
//! | POST   | `/projects/{id}/synthesize`            | `{"rendition"}` or `{"contour"}` | 201 `{"rendition"}` |
//! | GET    | `/projects/{id}/audio/{rendition}`     | `?lowpass=true\|false`       | 200 `audio/wav` |
//! | GET    | `/projects/{id}/renditions`            |                              | 200 rendition list |
//!
//! Errors are JSON `{"error", "component"}` with 404 (unknown project or
//! rendition), 409 (model checkpoint unavailable) or 422 (invalid input,
//! `component` naming the rejecting stage).

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use prosody_core::pitch::SpeakerStats;

use crate::error::ServiceError;
use crate::store::{GenerateRequest, NewProject, ProjectStore, SynthesizeRequest};

/// Upload limit for project creation.
pub const MAX_UPLOAD_BYTES: usize = 256 * 1024 * 1024;

pub fn router(store: Arc<ProjectStore>) -> Router {
    Router::new()
        .route("/projects", post(create_project))
        .route("/projects/{id}/analysis", get(get_analysis))
        .route("/projects/{id}/generate", post(generate))
        .route("/projects/{id}/synthesize", post(synthesize))
        .route("/projects/{id}/audio/{rendition}", get(get_audio))
        .route("/projects/{id}/renditions", get(renditions))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(store)
}

/// Runs store work on the blocking pool: analysis, generation and PSOLA are
/// CPU-bound and the store's locks are synchronous.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

fn json_body<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(bytes).map_err(|e| ServiceError::invalid("request", e))
}

async fn create_project(
    State(store): State<Arc<ProjectStore>>,
    mut form: Multipart,
) -> Result<Response, ServiceError> {
    let (mut audio, mut alignment, mut embeddings, mut model, mut stats) = (None, None, None, None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ServiceError::invalid("request", e))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ServiceError::invalid("request", e))?;
        match name.as_str() {
            "audio" => audio = Some(bytes),
            "alignment" => alignment = Some(bytes),
            "embeddings" => embeddings = Some(bytes),
            "model" => model = Some(String::from_utf8_lossy(&bytes).trim().to_string()),
            "stats" => stats = Some(json_body::<SpeakerStats>(&bytes)?),
            other => return Err(ServiceError::invalid("request", format!("unexpected part {other:?}"))),
        }
    }
    let missing = |part: &str| ServiceError::invalid("request", format!("missing part {part:?}"));
    let audio = audio.ok_or_else(|| missing("audio"))?;
    let alignment = alignment.ok_or_else(|| missing("alignment"))?;
    let embeddings = embeddings.ok_or_else(|| missing("embeddings"))?;
    let model = model.ok_or_else(|| missing("model"))?;
    let id = blocking(move || {
        store.create_project(NewProject {
            wav: &audio,
            alignment: &alignment,
            embeddings: &embeddings,
            model_id: &model,
            stats,
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "id": id }))).into_response())
}

async fn get_analysis(
    State(store): State<Arc<ProjectStore>>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let doc = blocking(move || store.analysis(&id)).await?;
    Ok(Json(doc).into_response())
}

async fn generate(
    State(store): State<Arc<ProjectStore>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Response, ServiceError> {
    let req: GenerateRequest = json_body(&body)?;
    let out = blocking(move || store.generate(&id, &req)).await?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn synthesize(
    State(store): State<Arc<ProjectStore>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Response, ServiceError> {
    let req: SynthesizeRequest = json_body(&body)?;
    let rendition = blocking(move || store.synthesize(&id, &req)).await?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "rendition": rendition }))).into_response())
}

#[derive(Debug, Deserialize)]
struct AudioQuery {
    #[serde(default)]
    lowpass: bool,
}

async fn get_audio(
    State(store): State<Arc<ProjectStore>>,
    Path((id, rendition)): Path<(String, String)>,
    Query(q): Query<AudioQuery>,
) -> Result<Response, ServiceError> {
    let wav = blocking(move || store.audio_bytes(&id, &rendition, q.lowpass)).await?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], wav).into_response())
}

async fn renditions(
    State(store): State<Arc<ProjectStore>>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let list = blocking(move || store.renditions(&id)).await?;
    Ok(Json(list).into_response())
}

/// Serves the API on `addr` until interrupted.
pub async fn serve(store: Arc<ProjectStore>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
