//! JSON over HTTP.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `GET /environments` | | `[{env_id, candidates}]` |
//! | `POST /query` | `{instruction, env_id, top_k?, session_id?}` | `{query_id, session_id, results: [...]}` |
//! | `POST /select` | `{query_id, candidate_id}` | selection event |
//! | `GET /session/{id}/log` | | `[event]` |
//! | `GET /files/...` | | dataset images |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::{QueryRequest, SelectRequest, Server, ServiceError};

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    kind: &'static str,
}

impl ServiceError {
    pub fn status(&self) -> (StatusCode, &'static str) {
        use ServiceError::*;
        match self {
            UnknownEnv(_) => (StatusCode::NOT_FOUND, "unknown_env"),
            UnknownQuery(_) => (StatusCode::NOT_FOUND, "unknown_query"),
            UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            Expired(_) => (StatusCode::GONE, "expired"),
            EmptyInstruction => (StatusCode::BAD_REQUEST, "empty_instruction"),
            TopK { .. } => (StatusCode::BAD_REQUEST, "bad_top_k"),
            NotShown(_) => (StatusCode::BAD_REQUEST, "not_shown"),
            Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            StaleIndex(_) => (StatusCode::SERVICE_UNAVAILABLE, "stale_index"),
            Index(_) | Grasp(_) | Dispatch(_) | Core(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (code, kind) = self.status();
        (code, Json(ErrorBody { error: self.to_string(), kind })).into_response()
    }
}

type Reply<T> = Result<Json<T>, ServiceError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ServiceError::Dispatch(format!("worker failed: {e}"))))
}

async fn environments(State(s): State<Arc<Server>>) -> Json<Vec<crate::EnvSummary>> {
    Json(s.service.environments())
}

async fn query(State(s): State<Arc<Server>>, Json(req): Json<QueryRequest>) -> Reply<crate::QueryResponse> {
    blocking(move || s.query(&req)).await.map(Json)
}

async fn select(State(s): State<Arc<Server>>, Json(req): Json<SelectRequest>) -> Reply<crate::SelectionEvent> {
    blocking(move || s.select(&req)).await.map(Json)
}

async fn session_log(State(s): State<Arc<Server>>, Path(id): Path<String>) -> Reply<Vec<crate::SelectionEvent>> {
    s.session_log(&id).map(Json)
}

pub fn router(server: Arc<Server>) -> Router {
    let files = ServeDir::new(server.files_root());
    let prefix = server.config.files_prefix.clone();
    Router::new()
        .route("/environments", get(environments))
        .route("/query", post(query))
        .route("/select", post(select))
        .route("/session/{id}/log", get(session_log))
        .nest_service(&prefix, files)
        .layer(CorsLayer::permissive())
        .with_state(server)
}

/// Serves until ctrl-c.
pub async fn serve(server: Arc<Server>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(server))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
