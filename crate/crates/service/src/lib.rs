//! HTTP front end for explorer sessions.
//!
//! Sessions live in memory. Every session sits behind its own lock; edit
//! jobs run on a worker thread and only take the lock to start and to
//! install their result, so image, status and consistency requests keep
//! answering while a job runs.

mod error;
mod routes;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::SystemTime;

use axum::Router;
use cemx_core::explorer::Session;
use serde::Serialize;

pub use error::{ApiError, ApiResult};

/// Address used when `CEMX_ADDR` is unset.
pub const DEFAULT_ADDR: &str = "127.0.0.1:8787";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    /// Accepted steps so far.
    pub step: usize,
    pub steps: usize,
    pub initial: Option<f64>,
    /// Objective after every accepted step.
    pub trace: Vec<f64>,
    pub stalled: bool,
    pub error: Option<String>,
}

pub struct ApiSession {
    pub id: String,
    pub created_at: SystemTime,
    pub session: Mutex<Session>,
    jobs: Mutex<HashMap<String, JobStatus>>,
    next_job: Mutex<u64>,
}

impl ApiSession {
    fn new(id: String, session: Session) -> Self {
        ApiSession {
            id,
            created_at: SystemTime::now(),
            session: Mutex::new(session),
            jobs: Mutex::new(HashMap::new()),
            next_job: Mutex::new(0),
        }
    }

    pub fn job(&self, id: &str) -> Option<JobStatus> {
        self.jobs.lock().unwrap().get(id).cloned()
    }
}

#[derive(Default)]
pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<ApiSession>>>,
}

impl AppState {
    pub fn new() -> Arc<Self> {
        Arc::new(AppState::default())
    }

    /// Registers a session under a fresh id.
    pub fn insert(&self, session: Session) -> Arc<ApiSession> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let entry = Arc::new(ApiSession::new(id.clone(), session));
        self.sessions.write().unwrap().insert(id, entry.clone());
        entry
    }

    pub fn get(&self, id: &str) -> ApiResult<Arc<ApiSession>> {
        self.sessions.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub fn remove(&self, id: &str) -> ApiResult<()> {
        self.sessions.write().unwrap().remove(id).map(|_| ()).ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    routes::router(state)
}

/// `CEMX_ADDR`, or [`DEFAULT_ADDR`].
pub fn addr_from_env() -> String {
    std::env::var("CEMX_ADDR").unwrap_or_else(|_| DEFAULT_ADDR.to_string())
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: &str) -> std::io::Result<()> {
    let addr: SocketAddr = addr
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad address {addr}: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("cemx service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new())).await
}
