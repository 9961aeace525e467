//! HTTP service wrapping the experiment pipeline.
//!
//! Quick operations (`/v1/retrieve`, `/v1/synth-gen`, `/v1/probe-gap`,
//! `/v1/eval`) run on the blocking pool and respond inline. Training runs
//! (`/v1/experiments`, `/v1/sweep`) return a job id immediately; progress is
//! polled via `GET /v1/jobs/{id}`. Artifacts are written to the
//! request-specified output directories, so the service is intended for
//! clients that share its filesystem.
//!
//! Every error response is a JSON [`ApiError`] naming the pipeline stage
//! that failed.

mod error;
mod handlers;
mod jobs;

use std::net::SocketAddr;

use axum::routing::{get, post};
use axum::Router;

pub use error::ServiceError;
pub use jobs::JobTable;

/// Shared handler state: the job table.
#[derive(Clone, Default)]
pub struct AppState {
    jobs: JobTable,
}

/// The full route table over the given state.
pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(handlers::healthz))
        .route("/v1/retrieve", post(handlers::retrieve))
        .route("/v1/synth-gen", post(handlers::synth_gen))
        .route("/v1/probe-gap", post(handlers::probe_gap))
        .route("/v1/eval", post(handlers::eval_checkpoint))
        .route("/v1/experiments", post(handlers::submit_experiment))
        .route("/v1/sweep", post(handlers::submit_sweep))
        .route("/v1/jobs/{id}", get(handlers::job_status))
        .with_state(state)
}

/// Serve on `addr` until the process is stopped.
pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::default())).await
}

/// Bind an OS-assigned localhost port and serve in a background task.
/// Used by tests and by the CLI when no remote server is configured; the
/// server dies with the returned task handle (or the process).
pub async fn bind_ephemeral() -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router(AppState::default())).await {
            tracing::error!("ephemeral server stopped: {}", e);
        }
    });
    Ok((addr, handle))
}
