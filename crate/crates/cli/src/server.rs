//! HTTP reward serving for an external RL trainer.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use uiekit_core::reward::{handle_request, RewardRequest};
use uiekit_core::{RewardBreakdown, RewardConfig};

/// `POST /reward` scores one request; `POST /reward/batch` scores an array and
/// reports per-item errors in place. `GET /health` answers `ok`.
pub fn router(default_cfg: RewardConfig) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/reward", post(reward_one))
        .route("/reward/batch", post(reward_batch))
        .with_state(Arc::new(default_cfg))
}

async fn reward_one(
    State(cfg): State<Arc<RewardConfig>>,
    Json(req): Json<RewardRequest>,
) -> Result<Json<RewardBreakdown>, (StatusCode, Json<Value>)> {
    handle_request(&req, &cfg)
        .map(Json)
        .map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({"error": e.to_string()}))))
}

async fn reward_batch(State(cfg): State<Arc<RewardConfig>>, Json(reqs): Json<Vec<RewardRequest>>) -> Json<Vec<Value>> {
    let out = tokio::task::spawn_blocking(move || {
        reqs.iter()
            .map(|r| match handle_request(r, &cfg) {
                Ok(b) => serde_json::to_value(b).expect("breakdown serializes"),
                Err(e) => json!({"error": e.to_string()}),
            })
            .collect()
    })
    .await
    .unwrap_or_default();
    Json(out)
}

pub async fn serve(addr: &str, default_cfg: RewardConfig) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("reward server listening on {}", listener.local_addr()?);
    axum::serve(listener, router(default_cfg)).await?;
    Ok(())
}
