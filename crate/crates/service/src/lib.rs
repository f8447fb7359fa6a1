//! HTTP/JSON service for conducting trials cohort by cohort.
//!
//! Mutations carry the version they were based on; a stale version gets 409.
//! Placing a cohort away from the recommendation needs `"override": true` and
//! is flagged in the event log.

pub mod api;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use api::{router, AppState};
pub use store::{Store, StoreError};

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, data_dir: PathBuf, static_dir: Option<PathBuf>) -> Result<(), Box<dyn std::error::Error>> {
    let store = Store::open(data_dir)?;
    let app = router(AppState { store: Arc::new(store) }, static_dir);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
