//! HTTP moderation service: one moderation endpoint plus a versioned policy
//! store that hot-swaps without a restart.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::Deserialize;
use serde_json::{json, Value};

use guardrail_core::codec::{keyword_fallback, parse_moderation_output, ResultSource};
use guardrail_core::gateway::{Gateway, ImageRef};
use guardrail_core::policy::{apply_policy_update, parse_policy, Policy, PolicyUpdate, UpdateOp};
use guardrail_core::prompt::{build_classification_prompt, build_comprehension_prompt, Mode};

/// Versioned policy snapshots. In-flight requests hold an `Arc` to the
/// version they started with; PUT only adds versions and moves the pointer.
pub struct PolicyStore {
    versions: BTreeMap<u32, Arc<Policy>>,
    active: u32,
}

impl PolicyStore {
    pub fn new(initial: Policy) -> Self {
        let version = initial.version;
        let mut versions = BTreeMap::new();
        versions.insert(version, Arc::new(initial));
        Self { versions, active: version }
    }

    pub fn active(&self) -> Arc<Policy> {
        self.versions[&self.active].clone()
    }

    pub fn get(&self, version: u32) -> Option<Arc<Policy>> {
        self.versions.get(&version).cloned()
    }

    pub fn insert_active(&mut self, policy: Policy) {
        self.active = policy.version;
        self.versions.insert(policy.version, Arc::new(policy));
    }
}

pub struct AppState {
    pub store: RwLock<PolicyStore>,
    pub gateway: Arc<Gateway>,
    pub guardrail_backend: String,
    pub default_mode: Mode,
}

pub fn build_router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/moderate", post(moderate))
        .route("/v1/policies", get(list_policies))
        .route("/v1/policies", put(put_policy))
        .with_state(state)
}

struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct ModerateRequest {
    #[serde(default)]
    image_path: Option<String>,
    #[serde(default)]
    image_b64: Option<String>,
    #[serde(default)]
    image_tag: Option<String>,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    policy_version: Option<u32>,
}

fn parse_mode(raw: &str) -> Option<Mode> {
    match raw {
        "classification" => Some(Mode::Classification),
        "comprehension" => Some(Mode::Comprehension),
        _ => None,
    }
}

async fn moderate(
    State(state): State<Arc<AppState>>,
    Json(request): Json<ModerateRequest>,
) -> Result<Json<Value>, ApiError> {
    let image = match (&request.image_path, &request.image_b64, &request.image_tag) {
        (Some(path), _, _) => ImageRef::Path(path.into()),
        (None, Some(b64), _) => {
            let bytes = BASE64
                .decode(b64.as_bytes())
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("undecodable image: {e}")))?;
            ImageRef::Inline(bytes)
        }
        (None, None, Some(tag)) => ImageRef::Tag(tag.clone()),
        (None, None, None) => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "request carries no image"));
        }
    };
    let mode = match &request.mode {
        Some(raw) => parse_mode(raw)
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown mode {raw:?}")))?,
        None => state.default_mode,
    };
    let policy = {
        let store = state.store.read().expect("policy store lock");
        match request.policy_version {
            Some(v) => store.get(v).ok_or_else(|| {
                ApiError::new(StatusCode::CONFLICT, format!("unknown policy version {v}"))
            })?,
            None => store.active(),
        }
    };

    let gateway = state.gateway.clone();
    let backend = state.guardrail_backend.clone();
    let policy_for_call = policy.clone();
    let started = std::time::Instant::now();
    let outcome = tokio::task::spawn_blocking(move || {
        let prompt = match mode {
            Mode::Classification => build_classification_prompt(),
            _ => build_comprehension_prompt(&policy_for_call),
        };
        gateway.infer(&backend, &prompt, &image)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;

    let response = outcome.map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
    let report = parse_moderation_output(&response.text, &policy, mode);
    let result = match report.result {
        Some(r) if report.ok => r,
        _ => keyword_fallback(&response.text, &policy),
    };
    let source = match result.source {
        ResultSource::StructuredParse => "structured_parse",
        ResultSource::KeywordFallback => "keyword_fallback",
    };
    let mut body: Value = serde_json::from_str(&result.to_strict_json(&policy))
        .expect("strict emission is valid JSON");
    let doc = body.as_object_mut().expect("strict emission is an object");
    doc.insert("policy_version".to_string(), json!(policy.version));
    doc.insert("mode".to_string(), json!(match mode {
        Mode::Classification => "classification",
        _ => "comprehension",
    }));
    doc.insert("source".to_string(), json!(source));
    doc.insert("latency_seconds".to_string(), json!(started.elapsed().as_secs_f64()));
    Ok(Json(body))
}

async fn list_policies(State(state): State<Arc<AppState>>) -> Json<Value> {
    let store = state.store.read().expect("policy store lock");
    let versions: Vec<Value> = store
        .versions
        .values()
        .map(|p| {
            json!({
                "version": p.version,
                "provenance": p.provenance,
                "categories": p.category_ids(),
            })
        })
        .collect();
    Json(json!({ "active": store.active, "versions": versions }))
}

#[derive(Debug, Deserialize)]
struct PolicyPut {
    text: String,
}

async fn put_policy(
    State(state): State<Arc<AppState>>,
    Json(request): Json<PolicyPut>,
) -> Result<Json<Value>, ApiError> {
    let proposed = parse_policy(&request.text, None)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let mut store = state.store.write().expect("policy store lock");
    let active = store.active();
    let mut ops = Vec::new();
    for category in proposed.categories {
        if active.category(&category.id).is_some() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("category {:?} already exists", category.id),
            ));
        }
        ops.push(UpdateOp::Add(category));
    }
    let update = PolicyUpdate { ops, source: "submitted via PUT /v1/policies".to_string() };
    let updated = apply_policy_update(&active, &update)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let version = updated.version;
    let categories = updated.category_ids().into_iter().map(String::from).collect::<Vec<_>>();
    store.insert_active(updated);
    Ok(Json(json!({ "version": version, "categories": categories })))
}

/// Binds the listener and serves until shutdown.
pub async fn serve(state: Arc<AppState>, listen_address: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen_address).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, build_router(state)).await
}
