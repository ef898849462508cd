//! HTTP service: follow-up tasks (the hospital system's hand-off), interview
//! sessions, templates and reports.
//!
//! Each session sits behind its own async mutex. A second answer that
//! arrives while one is being processed gets `429` with `Retry-After`
//! instead of waiting, so clients control their own pacing.

mod routes;
mod state;

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;
use tracing::{info, warn};

pub use routes::{create_task, router, ApiError, CreateTask, MAX_ANSWER_CHARS, SCHEMA_VERSION};
pub use state::{scripted_providers, service_script, AppState, FollowupTask, ServiceConfig, SessionSlot, TaskStatus};

pub const ENV_DATA_DIR: &str = "FOLLOWUP_DATA_DIR";
pub const ENV_BIND_ADDR: &str = "FOLLOWUP_BIND_ADDR";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";

/// Serve until `shutdown` resolves; in-flight requests are allowed to finish.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    info!("shutting down");
}

/// Poll `dir` for task files (`*.json`, same body as `POST /tasks`). Each
/// file is renamed to `.accepted` or `.rejected` once handled.
pub fn spawn_task_watcher(state: Arc<AppState>, dir: PathBuf, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let state = state.clone();
            let dir = dir.clone();
            let _ = tokio::task::spawn_blocking(move || scan_task_dir(&state, &dir)).await;
        }
    })
}

/// One pass over the watch directory; returns the number of accepted files.
pub fn scan_task_dir(state: &AppState, dir: &std::path::Path) -> usize {
    let Ok(rd) = std::fs::read_dir(dir) else {
        return 0;
    };
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut accepted = 0;
    for p in paths {
        let parsed = std::fs::read(&p)
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice::<CreateTask>(&b).map_err(|e| e.to_string()));
        let result = parsed.and_then(|mut req| {
            if req.idempotency_key.is_none() {
                req.idempotency_key = p.file_name().map(|n| format!("file:{}", n.to_string_lossy()));
            }
            create_task(state, req).map_err(|e| e.message)
        });
        let suffix = match result {
            Ok((task, _)) => {
                info!(file = %p.display(), task = %task.task_id, "task file accepted");
                accepted += 1;
                "accepted"
            }
            Err(e) => {
                warn!(file = %p.display(), error = %e, "task file rejected");
                "rejected"
            }
        };
        let _ = std::fs::rename(&p, p.with_extension(suffix));
    }
    accepted
}
