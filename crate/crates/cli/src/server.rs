//! HTTP JSON API over a [`StudyStore`].
//!
//! - `GET /api/session/{participant}`: sets with display orders
//! - `POST /api/annotations`: `201 {"id"}` or `400`/`409` with violations
//! - `GET /api/report`: aggregated report
//! - `/media/*`: study videos and reference images; `/*`: UI build

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ffgo_core::study::{AnnotationRecord, StudyError, StudyStore, StudyViolation, ViolationKind};
use serde::Serialize;
use tower_http::services::ServeDir;

use crate::error::{CliError, Result};

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
    pub violations: Vec<StudyViolation>,
}

fn reject(status: StatusCode, error: &'static str, message: String, violations: Vec<StudyViolation>) -> Response {
    (
        status,
        Json(ErrorBody {
            error,
            message,
            violations,
        }),
    )
        .into_response()
}

fn study_error(e: StudyError) -> Response {
    let msg = e.to_string();
    match e {
        StudyError::RankViolation(v) => reject(StatusCode::BAD_REQUEST, "rank_violation", msg, v),
        StudyError::RatingOutOfRange(v) => reject(StatusCode::BAD_REQUEST, "rating_out_of_range", msg, v),
        StudyError::InvalidRecord(v) => reject(StatusCode::BAD_REQUEST, "invalid_record", msg, v),
        StudyError::UnknownSet(set) => reject(
            StatusCode::BAD_REQUEST,
            "unknown_set",
            msg.clone(),
            vec![StudyViolation::new(ViolationKind::UnknownSet, "set_id", format!("unknown set `{set}`"))],
        ),
        StudyError::DuplicateSubmission { .. } => reject(
            StatusCode::CONFLICT,
            "duplicate_submission",
            msg.clone(),
            vec![StudyViolation::new(ViolationKind::DuplicateSubmission, "set_id", msg)],
        ),
        StudyError::EmptyStudy => reject(StatusCode::NOT_FOUND, "empty_study", msg, Vec::new()),
        _ => reject(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg, Vec::new()),
    }
}

async fn session(State(store): State<Arc<StudyStore>>, Path(participant): Path<String>) -> Response {
    Json(store.session(&participant)).into_response()
}

async fn submit(State(store): State<Arc<StudyStore>>, body: Bytes) -> Response {
    let rec: AnnotationRecord = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            let msg = e.to_string();
            return reject(
                StatusCode::BAD_REQUEST,
                "malformed",
                msg.clone(),
                vec![StudyViolation::new(ViolationKind::Malformed, "", msg)],
            );
        }
    };
    // The append fsyncs; keep it off the async workers.
    match tokio::task::spawn_blocking(move || store.submit(rec)).await {
        Ok(Ok(id)) => (StatusCode::CREATED, Json(serde_json::json!({ "id": id }))).into_response(),
        Ok(Err(e)) => study_error(e),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), Vec::new()),
    }
}

async fn report(State(store): State<Arc<StudyStore>>) -> Response {
    match store.report() {
        Ok(r) => Json(r).into_response(),
        Err(e) => study_error(e),
    }
}

pub fn router(store: Arc<StudyStore>, media: Option<PathBuf>, static_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/api/session/{participant}", get(session))
        .route("/api/annotations", post(submit))
        .route("/api/report", get(report))
        .with_state(store);
    if let Some(m) = media {
        app = app.nest_service("/media", ServeDir::new(m));
    }
    if let Some(s) = static_dir {
        app = app.fallback_service(ServeDir::new(s));
    }
    app
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::from)
}

/// Block the calling thread serving `app` on `addr`.
pub fn serve_forever(addr: &str, app: Router) -> Result<()> {
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        axum::serve(listener, app).await?;
        Ok(())
    })
}

/// A server running on a background thread; dropped handles shut it down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Bind `addr` (port 0 for any) and serve in the background.
pub fn spawn(addr: &str, app: Router) -> Result<ServerHandle> {
    let rt = runtime()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
