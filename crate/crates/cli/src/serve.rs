//! HTTP front end of the infilling gateway.
//!
//! `POST /v1/infill` takes `{user_id, prefix, suffix, max_new_tokens}` and
//! answers `{middle, outcome, reused_token_estimate}`. With the `http`
//! backend the rendered prompt is forwarded as `{prompt, max_tokens}`; the
//! completion is read from `text`, `completion` or `choices[0].text` of the
//! reply. The `sim` backend answers with an empty middle.

use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use efim::config::{BackendKind, Config};
use efim::gateway::InfillRequest;
use efim::service::{CompletionRequest, InfillResponse, InfillService};
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub enum Backend {
    Sim,
    Http { client: reqwest::Client, endpoint: String },
}

pub struct AppState {
    pub service: InfillService,
    pub backend: Backend,
}

impl AppState {
    pub fn from_config(config: &Config) -> Result<Self> {
        let backend = match config.backend {
            BackendKind::Sim => Backend::Sim,
            BackendKind::Http => Backend::Http {
                client: reqwest::Client::new(),
                endpoint: config.endpoint.clone().context("http backend needs an endpoint")?,
            },
        };
        Ok(Self {
            service: InfillService::from_config(config)?,
            backend,
        })
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new().route("/v1/infill", post(infill)).with_state(state)
}

async fn infill(State(state): State<Arc<AppState>>, Json(req): Json<InfillRequest>) -> Result<Json<InfillResponse>, ApiError> {
    let prepared = state.service.prepare(&req).map_err(|e| ApiError {
        status: StatusCode::BAD_REQUEST,
        message: e.to_string(),
    })?;
    tracing::debug!(
        user = %req.user_id,
        outcome = prepared.decision.outcome.as_str(),
        tokens = prepared.prompt_tokens,
        reused = prepared.reused_token_estimate,
        "infill"
    );
    let middle = match &state.backend {
        Backend::Sim => String::new(),
        Backend::Http { client, endpoint } => complete(client, endpoint, prepared.prompt, req.max_new_tokens)
            .await
            .map_err(|e| ApiError {
                status: StatusCode::BAD_GATEWAY,
                message: format!("{e:#}"),
            })?,
    };
    Ok(Json(InfillResponse {
        middle,
        outcome: prepared.decision.outcome,
        reused_token_estimate: prepared.reused_token_estimate,
    }))
}

async fn complete(client: &reqwest::Client, endpoint: &str, prompt: String, max_tokens: u32) -> Result<String> {
    let reply: Value = client
        .post(endpoint)
        .json(&CompletionRequest { prompt, max_tokens })
        .send()
        .await
        .context("sending to completion endpoint")?
        .error_for_status()?
        .json()
        .await
        .context("completion endpoint reply is not JSON")?;
    completion_text(&reply).context("completion endpoint reply has no text")
}

fn completion_text(reply: &Value) -> Option<String> {
    reply
        .get("text")
        .or_else(|| reply.get("completion"))
        .or_else(|| reply.pointer("/choices/0/text"))
        .and_then(Value::as_str)
        .map(str::to_owned)
}

/// Binds the configured address and serves until the process ends. The
/// bound address is printed on stdout first, so `--bind 127.0.0.1:0` can be
/// used to pick a free port.
pub fn run_blocking(config: Config) -> Result<()> {
    let state = Arc::new(AppState::from_config(&config)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = TcpListener::bind(&config.bind)
            .await
            .with_context(|| format!("binding {}", config.bind))?;
        let addr = listener.local_addr()?;
        println!("listening on {addr}");
        tracing::info!(%addr, backend = ?config.backend, "serving");
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
