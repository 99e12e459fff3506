//! REST front of the task store. Every request becomes a command for the
//! single writer thread that owns the store.

use std::net::SocketAddr;
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use super::{Analysis, Counts, Task, TaskSpec, TaskStatus, TaskStore};
use crate::error::{Error, Result};

enum Command {
    Ingest(Vec<TaskSpec>, oneshot::Sender<Result<usize>>),
    Claim {
        client_id: String,
        worker_id: String,
        analysis: Option<Analysis>,
        reply: oneshot::Sender<Result<Option<Task>>>,
    },
    Complete {
        task_id: String,
        worker_id: String,
        status: TaskStatus,
        report_ref: Option<String>,
        reply: oneshot::Sender<Result<Task>>,
    },
    Renew {
        task_id: String,
        worker_id: String,
        reply: oneshot::Sender<Result<Task>>,
    },
    List(Option<TaskStatus>, oneshot::Sender<Result<Vec<Task>>>),
    Counts(oneshot::Sender<Counts>),
}

fn writer_loop(mut store: TaskStore, rx: mpsc::Receiver<Command>) {
    loop {
        let cmd = match rx.recv_timeout(Duration::from_secs(1)) {
            Ok(c) => c,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if let Err(e) = store.sweep() {
                    log::error!("lease sweep failed: {e}");
                }
                continue;
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => return,
        };
        match cmd {
            Command::Ingest(specs, r) => {
                let _ = r.send(store.ingest(specs));
            }
            Command::Claim {
                client_id,
                worker_id,
                analysis,
                reply,
            } => {
                let _ = reply.send(store.claim(&client_id, &worker_id, analysis));
            }
            Command::Complete {
                task_id,
                worker_id,
                status,
                report_ref,
                reply,
            } => {
                let _ = reply.send(store.complete(&task_id, &worker_id, status, report_ref));
            }
            Command::Renew {
                task_id,
                worker_id,
                reply,
            } => {
                let _ = reply.send(store.renew(&task_id, &worker_id));
            }
            Command::List(status, r) => {
                let _ = r.send(store.list(status));
            }
            Command::Counts(r) => {
                let _ = r.send(store.counts());
            }
        }
    }
}

#[derive(Clone)]
struct AppState {
    tx: mpsc::Sender<Command>,
}

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, kind) = match &self.0 {
            Error::Validation(_) | Error::Json(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            Error::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            Error::LeaseMismatch { .. } => (StatusCode::CONFLICT, "lease_mismatch"),
            Error::NotClaimed(_) => (StatusCode::CONFLICT, "not_claimed"),
            Error::LeaseExpired(_) => (StatusCode::GONE, "lease_expired"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (code, Json(json!({"error": kind, "message": self.0.to_string()}))).into_response()
    }
}

async fn ask<T>(state: &AppState, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> std::result::Result<T, ApiError> {
    let (tx, rx) = oneshot::channel();
    state
        .tx
        .send(make(tx))
        .map_err(|_| ApiError(Error::Backend("store writer stopped".into())))?;
    rx.await
        .map_err(|_| ApiError(Error::Backend("store writer dropped the request".into())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimRequest {
    pub client_id: String,
    pub worker_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<Analysis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteRequest {
    pub worker_id: String,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenewRequest {
    pub worker_id: String,
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<TaskStatus>,
}

fn body<T>(r: std::result::Result<Json<T>, axum::extract::rejection::JsonRejection>) -> std::result::Result<T, ApiError> {
    r.map(|Json(v)| v)
        .map_err(|e| ApiError(Error::Validation(vec![e.body_text()])))
}

async fn ingest(
    State(s): State<AppState>,
    req: std::result::Result<Json<IngestRequest>, axum::extract::rejection::JsonRejection>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let req = body(req)?;
    let n = ask(&s, |r| Command::Ingest(req.tasks, r)).await?.map_err(ApiError)?;
    Ok(Json(json!({"ingested": n})))
}

async fn claim(
    State(s): State<AppState>,
    req: std::result::Result<Json<ClaimRequest>, axum::extract::rejection::JsonRejection>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let req = body(req)?;
    let t = ask(&s, |reply| Command::Claim {
        client_id: req.client_id,
        worker_id: req.worker_id,
        analysis: req.analysis,
        reply,
    })
    .await?
    .map_err(ApiError)?;
    Ok(Json(json!({"task": t})))
}

async fn complete(
    State(s): State<AppState>,
    UrlPath(task_id): UrlPath<String>,
    req: std::result::Result<Json<CompleteRequest>, axum::extract::rejection::JsonRejection>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let req = body(req)?;
    let t = ask(&s, |reply| Command::Complete {
        task_id,
        worker_id: req.worker_id,
        status: req.status,
        report_ref: req.report_ref,
        reply,
    })
    .await?
    .map_err(ApiError)?;
    Ok(Json(json!({"task": t})))
}

async fn renew(
    State(s): State<AppState>,
    UrlPath(task_id): UrlPath<String>,
    req: std::result::Result<Json<RenewRequest>, axum::extract::rejection::JsonRejection>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let req = body(req)?;
    let t = ask(&s, |reply| Command::Renew {
        task_id,
        worker_id: req.worker_id,
        reply,
    })
    .await?
    .map_err(ApiError)?;
    Ok(Json(json!({"task": t})))
}

async fn list(
    State(s): State<AppState>,
    Query(q): Query<ListQuery>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let tasks = ask(&s, |r| Command::List(q.status, r)).await?.map_err(ApiError)?;
    Ok(Json(json!({"tasks": tasks})))
}

async fn health(State(s): State<AppState>) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let c = ask(&s, Command::Counts).await?;
    Ok(Json(json!({"status": "ok", "counts": c})))
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/tasks", post(ingest).get(list))
        .route("/tasks/claim", post(claim))
        .route("/tasks/{id}/complete", post(complete))
        .route("/tasks/{id}/renew", post(renew))
        .route("/health", get(health))
        .with_state(state)
}

pub struct BackendServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    http: Option<JoinHandle<()>>,
    writer: Option<JoinHandle<()>>,
}

impl BackendServer {
    /// Binds first, so a taken port fails here rather than later.
    pub fn start(store: TaskStore, bind: &str) -> Result<Self> {
        let listener = std::net::TcpListener::bind(bind)
            .map_err(|e| Error::Backend(format!("bind {bind}: {e}")))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let writer = std::thread::spawn(move || writer_loop(store, rx));
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_io()
            .enable_time()
            .build()?;
        let app = router(AppState { tx });
        let http = std::thread::spawn(move || {
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("backend listener: {e}");
                        return;
                    }
                };
                let serve = axum::serve(listener, app).with_graceful_shutdown(async move {
                    let _ = stop_rx.await;
                });
                if let Err(e) = serve.await {
                    log::error!("backend server: {e}");
                }
            });
        });
        Ok(BackendServer {
            addr,
            shutdown: Some(stop_tx),
            http: Some(http),
            writer: Some(writer),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(&mut self) {
        if let Some(s) = self.shutdown.take() {
            let _ = s.send(());
        }
        if let Some(h) = self.http.take() {
            let _ = h.join();
        }
        // The router held the last sender; the writer ends once it drops.
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
    }

    /// Blocks until the server stops.
    pub fn join(mut self) {
        if let Some(h) = self.http.take() {
            let _ = h.join();
        }
    }
}

impl Drop for BackendServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
