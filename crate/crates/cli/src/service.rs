//! HTTP service for interactive intervention sessions.
//!
//! Every state change is appended to an optional JSON-lines session log.
//! Replaying the log against the same checkpoint rebuilds every session
//! and reproduces every response.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use conceptlab_core::data::Split;
use conceptlab_core::model::{ConceptModel, ConceptState};
use conceptlab_core::policy::{argmax_free, CoopConfig, Policy, PolicyKind, StateBatch};
use conceptlab_tensor::RngStream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const BIND_ENV: &str = "CONCEPTLAB_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session {0}")]
    NotFound(u64),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<conceptlab_core::Error> for ApiError {
    fn from(e: conceptlab_core::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_x: Option<Vec<f64>>,
}

/// Expert value for a group: a member index (one-hot) for multi-concept
/// groups, 0/1 for single concepts, or explicit per-member values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupValue {
    Index(usize),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterveneRequest {
    pub group: usize,
    pub value: GroupValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptView {
    pub group: usize,
    pub members: Vec<usize>,
    pub p_hat: Vec<f64>,
    pub intervened: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub group: usize,
    pub value: Vec<f64>,
    pub class_dist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: u64,
    pub concepts: Vec<ConceptView>,
    pub class_dist: Vec<f64>,
    pub history: Vec<HistoryEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<usize>,
    /// Ground truth, exposed in demo mode only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub group: usize,
    pub policy: String,
    /// `null` for groups that are already intervened.
    pub scores: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub variant: String,
    pub n_inputs: usize,
    pub n_concepts: usize,
    pub n_classes: usize,
    pub n_outputs: usize,
    pub groups: Vec<Vec<usize>>,
    pub emb_width: usize,
    pub policy: String,
    pub demo: bool,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LogEvent {
    Create { session_id: u64, request: CreateRequest },
    Intervene { session_id: u64, group: usize, value: GroupValue },
    Undo { session_id: u64 },
    Delete { session_id: u64 },
}

#[derive(Debug, Clone)]
struct Session {
    id: u64,
    sample_index: Option<usize>,
    state: ConceptState,
    truth: Option<Vec<f64>>,
    label: Option<usize>,
    mask: Vec<f64>,
    experts: Vec<f64>,
    initial_dist: Vec<f64>,
    history: Vec<HistoryEntry>,
}

pub struct ServiceConfig {
    pub policy: Policy,
    /// Samples addressable by `sample_index`, with ground truth.
    pub data: Option<Split>,
    /// Expose ground truth in session views.
    pub demo: bool,
    pub log_path: Option<PathBuf>,
}

pub struct AppState {
    model: ConceptModel,
    policy: Policy,
    data: Option<Split>,
    demo: bool,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    log: Option<Mutex<File>>,
}

pub type Shared = Arc<AppState>;

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl AppState {
    /// Builds the service state, replaying an existing session log first.
    /// Returns the state and the responses produced by the replay.
    pub fn open(model: ConceptModel, cfg: ServiceConfig) -> anyhow::Result<(Shared, Vec<serde_json::Value>)> {
        let mut state = AppState {
            model,
            policy: cfg.policy,
            data: cfg.data,
            demo: cfg.demo,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            log: None,
        };
        let mut replayed = Vec::new();
        if let Some(path) = &cfg.log_path {
            if path.exists() {
                replayed = state.replay(path)?;
            }
            let f = OpenOptions::new().create(true).append(true).open(path)?;
            state.log = Some(Mutex::new(f));
        }
        Ok((Arc::new(state), replayed))
    }

    pub fn model(&self) -> &ConceptModel {
        &self.model
    }

    fn replay(&self, path: &Path) -> anyhow::Result<Vec<serde_json::Value>> {
        let mut out = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: LogEvent = serde_json::from_str(&line)
                .map_err(|e| anyhow::anyhow!("session log line {}: {e}", i + 1))?;
            let resp = self
                .apply(&ev)
                .map_err(|e| anyhow::anyhow!("session log line {}: {e}", i + 1))?;
            out.push(resp);
        }
        Ok(out)
    }

    /// Applies a logged event, returning the response body it produced.
    pub fn apply(&self, ev: &LogEvent) -> Result<serde_json::Value, ApiError> {
        let v = match ev {
            LogEvent::Create { session_id, request } => to_json(&self.create_with_id(*session_id, request)?),
            LogEvent::Intervene {
                session_id,
                group,
                value,
            } => to_json(&self.intervene_inner(*session_id, *group, value)?),
            LogEvent::Undo { session_id } => to_json(&self.undo_inner(*session_id)?),
            LogEvent::Delete { session_id } => {
                self.delete_inner(*session_id)?;
                serde_json::json!({ "deleted": session_id })
            }
        };
        Ok(v)
    }

    fn record(&self, ev: &LogEvent) -> Result<(), ApiError> {
        if let Some(log) = &self.log {
            let mut f = lock(log);
            let line = serde_json::to_string(ev).map_err(|e| ApiError::Internal(e.to_string()))?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        Ok(())
    }

    fn session(&self, id: u64) -> Result<Arc<Mutex<Session>>, ApiError> {
        lock(&self.sessions).get(&id).cloned().ok_or(ApiError::NotFound(id))
    }

    fn class_dist(&self, s: &Session) -> Result<Vec<f64>, ApiError> {
        Ok(self.model.class_probs(&s.state, &[0], &s.mask, &s.experts)?)
    }

    fn view(&self, s: &Session) -> Result<SessionView, ApiError> {
        let groups = &self.model.config().groups;
        let concepts = (0..groups.len())
            .map(|g| {
                let members = groups.members(g).to_vec();
                let intervened = members.iter().all(|&i| s.mask[i] == 1.0);
                ConceptView {
                    group: g,
                    p_hat: members.iter().map(|&i| s.state.probs[i]).collect(),
                    value: intervened.then(|| members.iter().map(|&i| s.experts[i]).collect()),
                    members,
                    intervened,
                }
            })
            .collect();
        Ok(SessionView {
            session_id: s.id,
            concepts,
            class_dist: self.class_dist(s)?,
            history: s.history.clone(),
            sample_index: s.sample_index,
            truth: if self.demo { s.truth.clone() } else { None },
            label: if self.demo { s.label } else { None },
        })
    }

    pub fn create(&self, req: &CreateRequest) -> Result<SessionView, ApiError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        self.create_with_id(id, req)
    }

    fn create_with_id(&self, id: u64, req: &CreateRequest) -> Result<SessionView, ApiError> {
        let cfg = self.model.config();
        let (x, truth, label) = match (req.sample_index, &req.raw_x) {
            (Some(i), None) => {
                let data = self
                    .data
                    .as_ref()
                    .ok_or_else(|| ApiError::BadRequest("service has no sample data".into()))?;
                if i >= data.len() {
                    return Err(ApiError::BadRequest(format!("sample_index {i} out of range ({})", data.len())));
                }
                (data.x_row(i).to_vec(), Some(data.c_row(i).to_vec()), Some(data.y[i]))
            }
            (None, Some(x)) => {
                if x.len() != cfg.n_inputs || x.iter().any(|v| !v.is_finite()) {
                    return Err(ApiError::BadRequest(format!("raw_x must hold {} finite values", cfg.n_inputs)));
                }
                (x.clone(), None, None)
            }
            _ => return Err(ApiError::BadRequest("give exactly one of sample_index and raw_x".into())),
        };
        let k = cfg.n_concepts;
        let state = self.model.encode(&x, 1)?;
        let mut s = Session {
            id,
            sample_index: req.sample_index,
            state,
            truth,
            label,
            mask: vec![0.0; k],
            experts: vec![0.5; k],
            initial_dist: Vec::new(),
            history: Vec::new(),
        };
        s.initial_dist = self.class_dist(&s)?;
        let view = self.view(&s)?;
        {
            let mut sessions = lock(&self.sessions);
            if sessions.contains_key(&id) {
                return Err(ApiError::Conflict(format!("session {id} already exists")));
            }
            sessions.insert(id, Arc::new(Mutex::new(s)));
        }
        self.next_id.fetch_max(id + 1, Ordering::SeqCst);
        self.record(&LogEvent::Create {
            session_id: id,
            request: req.clone(),
        })?;
        Ok(view)
    }

    pub fn get(&self, id: u64) -> Result<SessionView, ApiError> {
        let s = self.session(id)?;
        let s = lock(&s);
        self.view(&s)
    }

    fn group_values(&self, group: usize, value: &GroupValue) -> Result<Vec<f64>, ApiError> {
        let groups = &self.model.config().groups;
        let size = groups.members(group).len();
        let vals = match value {
            GroupValue::Index(j) if size == 1 => {
                if *j > 1 {
                    return Err(ApiError::BadRequest("binary concept value must be 0 or 1".into()));
                }
                vec![*j as f64]
            }
            GroupValue::Index(j) => {
                if *j >= size {
                    return Err(ApiError::BadRequest(format!("member index {j} out of range for group of {size}")));
                }
                (0..size).map(|i| f64::from(u8::from(i == *j))).collect()
            }
            GroupValue::Values(v) => {
                if v.len() != size || v.iter().any(|&x| x != 0.0 && x != 1.0) {
                    return Err(ApiError::BadRequest(format!("value must hold {size} entries in {{0, 1}}")));
                }
                v.clone()
            }
        };
        Ok(vals)
    }

    pub fn intervene(&self, id: u64, req: &InterveneRequest) -> Result<SessionView, ApiError> {
        self.intervene_inner(id, req.group, &req.value)
    }

    fn intervene_inner(&self, id: u64, group: usize, value: &GroupValue) -> Result<SessionView, ApiError> {
        let groups = &self.model.config().groups;
        if group >= groups.len() {
            return Err(ApiError::BadRequest(format!("group {group} out of range ({})", groups.len())));
        }
        let vals = self.group_values(group, value)?;
        let s = self.session(id)?;
        let mut s = lock(&s);
        let members = groups.members(group);
        if members.iter().all(|&i| s.mask[i] == 1.0) {
            return Err(ApiError::Conflict(format!("group {group} is already intervened")));
        }
        for (&i, &v) in members.iter().zip(&vals) {
            s.mask[i] = 1.0;
            s.experts[i] = v;
        }
        let class_dist = self.class_dist(&s)?;
        s.history.push(HistoryEntry {
            group,
            value: vals,
            class_dist,
        });
        let view = self.view(&s)?;
        self.record(&LogEvent::Intervene {
            session_id: id,
            group,
            value: value.clone(),
        })?;
        Ok(view)
    }

    pub fn undo(&self, id: u64) -> Result<SessionView, ApiError> {
        self.undo_inner(id)
    }

    fn undo_inner(&self, id: u64) -> Result<SessionView, ApiError> {
        let s = self.session(id)?;
        let mut s = lock(&s);
        if s.history.pop().is_none() {
            return Err(ApiError::Conflict("nothing to undo".into()));
        }
        // Rebuild the mask from the remaining history.
        let k = s.mask.len();
        let groups = &self.model.config().groups;
        let mut mask = vec![0.0; k];
        let mut experts = vec![0.5; k];
        for h in &s.history {
            for (&i, &v) in groups.members(h.group).iter().zip(&h.value) {
                mask[i] = 1.0;
                experts[i] = v;
            }
        }
        s.mask = mask;
        s.experts = experts;
        let view = self.view(&s)?;
        debug_assert!(!s.history.is_empty() || view.class_dist == s.initial_dist);
        self.record(&LogEvent::Undo { session_id: id })?;
        Ok(view)
    }

    pub fn delete(&self, id: u64) -> Result<(), ApiError> {
        self.delete_inner(id)
    }

    fn delete_inner(&self, id: u64) -> Result<(), ApiError> {
        lock(&self.sessions).remove(&id).ok_or(ApiError::NotFound(id))?;
        self.record(&LogEvent::Delete { session_id: id })
    }

    fn policy_for(&self, kind: Option<&str>) -> Result<Policy, ApiError> {
        let Some(name) = kind else {
            return Ok(self.policy.clone());
        };
        let kind: PolicyKind = name.parse().map_err(|e: conceptlab_core::Error| ApiError::BadRequest(e.to_string()))?;
        if kind == self.policy.kind() {
            return Ok(self.policy.clone());
        }
        match kind {
            PolicyKind::Random => Ok(Policy::Random),
            PolicyKind::Ucp => Ok(Policy::Ucp),
            PolicyKind::Coop => Ok(Policy::Coop(CoopConfig::default())),
            PolicyKind::Skyline => Ok(Policy::Skyline),
            PolicyKind::LearnedPsi if self.model.config().variant.has_policy() => Ok(Policy::LearnedPsi),
            other => Err(ApiError::BadRequest(format!("policy {other} is not available on this service"))),
        }
    }

    /// Next group under the configured policy, or under `policy` when given.
    pub fn suggest(&self, id: u64, policy: Option<&str>) -> Result<Suggestion, ApiError> {
        let policy = self.policy_for(policy)?;
        let s = self.session(id)?;
        let s = lock(&s);
        let groups = &self.model.config().groups;
        if (0..groups.len()).all(|g| groups.members(g).iter().all(|&i| s.mask[i] == 1.0)) {
            return Err(ApiError::Conflict("every group is already intervened".into()));
        }
        let label = s.label.map(|l| [l]);
        let truth = match (&s.truth, &label) {
            (Some(c), Some(l)) => Some((c.as_slice(), l.as_slice())),
            _ => None,
        };
        if policy.needs_truth() && truth.is_none() {
            return Err(ApiError::BadRequest(format!("policy {} needs ground truth", policy.name())));
        }
        let batch = StateBatch {
            state: &s.state,
            rows: &[0],
            masks: &s.mask,
            experts: &s.experts,
            truth,
        };
        let mut rngs = [RngStream::new(s.id).split(s.history.len() as u64)];
        let scores = policy.scores(&self.model, &batch, &mut rngs)?;
        let group = argmax_free(groups, &s.mask, &scores[0])
            .ok_or_else(|| ApiError::Conflict("every group is already intervened".into()))?;
        Ok(Suggestion {
            group,
            policy: policy.name().to_string(),
            scores: scores[0].iter().map(|&v| v.is_finite().then_some(v)).collect(),
        })
    }

    pub fn summary(&self) -> ModelSummary {
        let cfg = self.model.config();
        ModelSummary {
            variant: cfg.variant.name().to_string(),
            n_inputs: cfg.n_inputs,
            n_concepts: cfg.n_concepts,
            n_classes: cfg.n_classes,
            n_outputs: cfg.n_outputs(),
            groups: cfg.groups.all().to_vec(),
            emb_width: cfg.emb_width,
            policy: self.policy.name().to_string(),
            demo: self.demo,
            n_samples: self.data.as_ref().map_or(0, Split::len),
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("response types serialize")
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

fn parse_id(raw: &str) -> Result<u64, ApiError> {
    raw.parse().map_err(|_| ApiError::BadRequest(format!("bad session id {raw:?}")))
}

#[derive(Debug, Deserialize)]
struct SuggestQuery {
    policy: Option<String>,
}

async fn create_h(State(st): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    Ok((StatusCode::CREATED, Json(st.create(&req)?)))
}

async fn get_h(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(st.get(parse_id(&id)?)?))
}

async fn delete_h(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ApiError> {
    st.delete(parse_id(&id)?)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn intervene_h(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let id = parse_id(&id)?;
    let req: InterveneRequest = parse_body(&body)?;
    Ok(Json(st.intervene(id, &req)?))
}

async fn suggest_h(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SuggestQuery>,
) -> Result<Json<Suggestion>, ApiError> {
    Ok(Json(st.suggest(parse_id(&id)?, q.policy.as_deref())?))
}

async fn undo_h(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(st.undo(parse_id(&id)?)?))
}

async fn model_h(State(st): State<Shared>) -> Json<ModelSummary> {
    Json(st.summary())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/model", get(model_h))
        .route("/sessions", post(create_h))
        .route("/sessions/{id}", get(get_h).delete(delete_h))
        .route("/sessions/{id}/intervene", post(intervene_h))
        .route("/sessions/{id}/suggest", get(suggest_h))
        .route("/sessions/{id}/undo", post(undo_h))
        .with_state(state)
}

/// Bind address: the explicit override, else `CONCEPTLAB_BIND`, else the
/// default.
pub fn bind_address(cli: Option<&str>) -> String {
    cli.map(str::to_string)
        .or_else(|| std::env::var(BIND_ENV).ok())
        .unwrap_or_else(|| DEFAULT_BIND.to_string())
}

pub async fn serve(state: Shared, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
