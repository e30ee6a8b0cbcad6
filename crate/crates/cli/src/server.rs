//! HTTP front end for [`SessionManager`].

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dialret::service::{
    AnswerRequest, CreateSessionRequest, ErrorPayload, FoundPayload, FoundRequest, HealthPayload, RoundPayload,
    SessionManager, SessionPayload, SessionView, VideoCard,
};
use dialret::Error;
use tower_http::services::ServeDir;

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::UnknownSession(_) | Error::UnknownVideo(_) => StatusCode::NOT_FOUND,
        Error::SessionClosed(_) => StatusCode::CONFLICT,
        Error::Invalid(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (
            status,
            Json(ErrorPayload {
                error: self.0.to_string(),
            }),
        )
            .into_response()
    }
}

type Shared = Arc<SessionManager>;
type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs model work off the async executor.
async fn blocking<T, F>(m: Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&SessionManager) -> dialret::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&m))
        .await
        .map_err(|e| ApiError(Error::Invalid(format!("worker failed: {e}"))))?
        .map(Json)
        .map_err(ApiError)
}

async fn health(State(m): State<Shared>) -> Json<HealthPayload> {
    Json(m.health())
}

async fn create_session(State(m): State<Shared>, Json(req): Json<CreateSessionRequest>) -> ApiResult<SessionPayload> {
    blocking(m, move |m| m.create(&req)).await
}

async fn answer(
    State(m): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<AnswerRequest>,
) -> ApiResult<RoundPayload> {
    blocking(m, move |m| m.answer(&id, &req)).await
}

async fn found(
    State(m): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<FoundRequest>,
) -> ApiResult<FoundPayload> {
    blocking(m, move |m| m.mark_found(&id, &req)).await
}

async fn view(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult<SessionView> {
    Ok(Json(m.view(&id)?))
}

async fn card(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult<VideoCard> {
    Ok(Json(m.card(&id)?))
}

pub fn router(manager: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(view))
        .route("/sessions/{id}/answers", post(answer))
        .route("/sessions/{id}/found", post(found))
        .route("/videos/{id}/card", get(card))
        .with_state(manager);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Purges idle sessions once a minute until the process exits.
pub fn spawn_reaper(manager: Shared) {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = manager.purge_expired_at(Instant::now());
            if n > 0 {
                log::info!("expired {n} idle sessions");
            }
        }
    });
}
