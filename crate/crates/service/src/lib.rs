//! HTTP JSON API over interactive refinement sessions.
//!
//! Models are read from a directory of checkpoints and never modified;
//! sessions persist to one directory each and survive restarts.

pub mod api;
pub mod config;
pub mod error;
pub mod models;
pub mod rle;
pub mod store;

use std::sync::Arc;

pub use api::{router, AppState};
pub use config::ServiceConfig;
pub use error::{ApiError, ErrorBody};
pub use models::{install_model, ModelRegistry};
pub use rle::RleMask;

/// Bind and serve until the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on {addr}");
    let state = Arc::new(AppState::new(config));
    axum::serve(listener, router(state)).await
}
