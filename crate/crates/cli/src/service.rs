//! Optional HTTP gateway: one request/response endpoint plus health.
//!
//! Requests for the same session are serialized; distinct sessions run
//! concurrently. Malformed bodies get a 400 with a diagnostic; a backend
//! outage surfaces as 503 with the Clarify verdict in the body.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Json, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};

use ragweir::grounded::ModelBackend;
use ragweir::model::{CpeTag, GuardAction, PipelineVariant, Session};
use ragweir::pipeline::{Pipeline, BACKEND_UNAVAILABLE};

use crate::config::AppConfig;

pub struct AppState {
    pipelines: HashMap<PipelineVariant, Pipeline>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    default_variant: PipelineVariant,
}

#[derive(Debug, Deserialize)]
struct TurnRequest {
    session_id: String,
    text: String,
    variant: Option<String>,
}

#[derive(Debug, Serialize)]
struct TurnResponse {
    action: GuardAction,
    reason: String,
    cpe_tags: Vec<CpeTag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

/// Build shared state with every variant's pipeline wired to one store,
/// telemetry log, and backend.
pub fn build_state(app: &AppConfig, backend: Arc<dyn ModelBackend>) -> Result<Arc<AppState>> {
    use ragweir::pipeline::FixtureTools;
    use ragweir::retrieval::{ChunkStore, HashEmbedder};
    use ragweir::telemetry::CpeLog;

    let embedder = Arc::new(HashEmbedder::new(256, app.mock_seed));
    let store = Arc::new(
        ChunkStore::load_records(&app.store_path, embedder.as_ref())
            .with_context(|| format!("loading store {}", app.store_path.display()))?,
    );
    let telemetry = Arc::new(
        CpeLog::with_file(&app.cpe_log_path)
            .with_context(|| format!("opening CPE log {}", app.cpe_log_path.display()))?,
    );
    let clock = if app.logical_timestamps {
        ragweir::model::Clock::logical()
    } else {
        ragweir::model::Clock::wall()
    };
    let tools = Arc::new(FixtureTools::new(app.mock_seed));

    let mut pipelines = HashMap::new();
    for variant in PipelineVariant::ALL {
        pipelines.insert(
            variant,
            Pipeline::new(
                app.pipeline_config(variant)?,
                Arc::clone(&store),
                embedder.clone() as Arc<dyn ragweir::retrieval::Embedder>,
                Arc::clone(&backend),
                tools.clone() as Arc<dyn ragweir::pipeline::ToolBackend>,
                Arc::clone(&telemetry),
                clock.clone(),
            )?,
        );
    }
    Ok(Arc::new(AppState {
        pipelines,
        sessions: Mutex::new(HashMap::new()),
        default_variant: app.variant,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/turn", post(handle_turn))
        .route("/health", get(handle_health))
        .with_state(state)
}

/// Run the service until interrupted.
pub fn serve(app: AppConfig) -> Result<()> {
    let listen = app
        .listen_address
        .clone()
        .context("no listen address configured (set --listen, RAGWEIR_LISTEN, or `listen`)")?;
    let state = build_state(&app, Arc::new(ragweir::grounded::EchoMock))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .with_context(|| format!("binding {listen}"))?;
        println!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}

async fn handle_health() -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "name": "ragweir",
        "version": env!("CARGO_PKG_VERSION"),
    }))
}

fn bad_request(message: impl Into<String>) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(ErrorBody {
            error: message.into(),
        }),
    )
        .into_response()
}

async fn handle_turn(State(state): State<Arc<AppState>>, body: String) -> Response {
    // Parse by hand so every malformed body is a 400 with a diagnostic.
    let request: TurnRequest = match serde_json::from_str(&body) {
        Ok(request) => request,
        Err(err) => return bad_request(format!("malformed request body: {err}")),
    };
    if request.session_id.is_empty() {
        return bad_request("session_id must be non-empty");
    }
    let variant = match &request.variant {
        None => state.default_variant,
        Some(name) => match PipelineVariant::parse(name) {
            Some(variant) => variant,
            None => return bad_request(format!("unknown variant `{name}`")),
        },
    };
    let pipeline = &state.pipelines[&variant];

    let slot = {
        let mut sessions = state.sessions.lock().unwrap();
        Arc::clone(
            sessions
                .entry(request.session_id.clone())
                .or_insert_with(|| Arc::new(Mutex::new(pipeline.new_session(request.session_id.clone())))),
        )
    };

    // Serializes turns for this session; the guard spans the whole run_turn.
    let verdict = {
        let mut session = slot.lock().unwrap();
        if session.variant != variant {
            return bad_request(format!(
                "session `{}` is bound to variant {}",
                request.session_id, session.variant
            ));
        }
        pipeline.run_turn(&mut session, &request.text)
    };

    let status = if verdict.reason == BACKEND_UNAVAILABLE {
        StatusCode::SERVICE_UNAVAILABLE
    } else {
        StatusCode::OK
    };
    (
        status,
        Json(TurnResponse {
            action: verdict.action,
            reason: verdict.reason,
            cpe_tags: verdict.cpe_tags,
            answer: verdict.answer,
        }),
    )
        .into_response()
}
