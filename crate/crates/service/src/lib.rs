//! Read-only HTTP inference API over trained checkpoints.
//!
//! Endpoints: `GET /health`, `GET /variants`, `GET /scenes`,
//! `GET /scenes/{id}`, `GET /scenes/{id}/concepts`, `POST /generate`.
//! Checkpoints are preloaded from a manifest at startup and never reloaded.

mod api;
mod error;
mod state;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::{
    router, ConceptsResponse, GenerateRequest, GenerateResponse, GuidanceEcho, Health, ObjectView, SceneDetail,
    ScenePage, SceneSummary, VariantInfo, API_VERSION,
};
pub use error::{ApiError, ErrorBody};
pub use state::{AppState, CheckpointEntry, Manifest, VariantSlot};

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
