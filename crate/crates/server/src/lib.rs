//! HTTP service for auditing qualitative coding: accounts, projects,
//! documents, codes and segments, with background consistency audits,
//! agreement statistics, facet discovery and a per-project push channel.

pub mod auth;
pub mod config;
pub mod error;
pub mod events;
pub mod queue;
pub mod routes;
pub mod state;
pub mod store;

use std::net::SocketAddr;

use tokio::net::TcpListener;

pub use config::ServerConfig;
pub use state::{AppState, StartupError};

pub fn app(state: AppState) -> axum::Router {
    routes::router(state)
}

/// Binds `config.listen` and serves until `shutdown` resolves.
pub async fn serve(
    config: &ServerConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let state = AppState::build(config)?;
    let listener = TcpListener::bind(config.listen).await?;
    serve_on(listener, state, shutdown).await
}

/// Serves `state` on an already bound listener.
pub async fn serve_on(
    listener: TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}
