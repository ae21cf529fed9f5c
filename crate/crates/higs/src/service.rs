//! Session HTTP service.
//!
//! Every mutating endpoint answers with the new revision and honours an
//! optional `If-Match: <revision>` header. Requests on one session run one at
//! a time; different sessions proceed in parallel.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use higs_core::graph::{GraphError, Nid};
use higs_core::layout::LayoutReport;
use higs_core::persistence::{save_scene, save_session, SceneMeta};
use higs_core::pipeline::{Backend, FailureCause, LogEntry, PipelineError, SceneSession, StepOutcome};
use higs_core::Vec3;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
    pub revision: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
            revision: None,
        }
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknownSession", format!("no session {id:?}"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalidBody", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind, "message": self.message });
        if let Some(r) = self.revision {
            body["revision"] = r.into();
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::invalid(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::invalid(r.body_text())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        use PipelineError as P;
        let msg = e.to_string();
        match e {
            P::UnknownAnchor(_) => ApiError::new(StatusCode::NOT_FOUND, "unknownAnchor", msg),
            P::Graph(GraphError::UnknownNid(_)) => ApiError::new(StatusCode::NOT_FOUND, "unknownNode", msg),
            P::Adapter(f) => match f.cause {
                FailureCause::Timeout => ApiError::new(StatusCode::GATEWAY_TIMEOUT, "adapterTimeout", msg),
                _ => ApiError::new(StatusCode::BAD_GATEWAY, "adapterFailure", msg),
            },
            P::AllEmpty => ApiError::invalid(msg),
            P::Graph(_) | P::Composition(_) | P::Layout(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "rejected", msg)
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    backend: Arc<dyn Backend>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<SceneSession>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(backend: Arc<dyn Backend>) -> Arc<Self> {
        Arc::new(AppState {
            backend,
            sessions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<SceneSession>>> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    /// Snapshot of a session, for tests and embedding.
    pub fn snapshot(&self, id: &str) -> Option<SceneSession> {
        let s = self.session(id).ok()?;
        let guard = s.lock().expect("session poisoned");
        Some(guard.clone())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/scene", get(get_scene))
        .route("/sessions/{id}/graph", get(get_graph))
        .route("/sessions/{id}/steps", post(post_step))
        .route("/sessions/{id}/nodes/{nid}", patch(patch_node).delete(delete_node))
        .route("/sessions/{id}/report", get(get_report))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, backend: Arc<dyn Backend>) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(backend)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn if_match(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    let Some(v) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    v.to_str()
        .ok()
        .map(|s| s.trim().trim_start_matches("W/").trim_matches('"'))
        .and_then(|s| s.parse().ok())
        .map(Some)
        .ok_or_else(|| ApiError::invalid("If-Match must be a revision number"))
}

/// Runs `op` under the session lock off the async runtime, after checking
/// the expected revision. A mismatch leaves the session alone.
async fn mutate<T, F>(state: &AppState, id: &str, expected: Option<u64>, op: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut SceneSession) -> ApiResult<T> + Send + 'static,
{
    let session = state.session(id)?;
    tokio::task::spawn_blocking(move || {
        let mut s = session.lock().expect("session poisoned");
        let current = s.global.revision();
        if let Some(want) = expected {
            if want != current {
                let mut e = ApiError::new(
                    StatusCode::CONFLICT,
                    "revisionConflict",
                    format!("revision is {current}, not {want}"),
                );
                e.revision = Some(current);
                return Err(e);
            }
        }
        op(&mut s)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn require_text(text: &str) -> ApiResult<()> {
    if text.trim().is_empty() {
        return Err(ApiError::invalid("text must not be empty"));
    }
    Ok(())
}

fn with_revision(revision: u64, status: StatusCode, body: Vec<u8>) -> Response {
    let mut resp = (status, body).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    h.insert(header::ETAG, HeaderValue::from_str(&format!("\"{revision}\"")).expect("digits"));
    resp
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CreateSession {
    pub text: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct Created {
    session_id: String,
    revision: u64,
    step: StepOutcome,
    scene: Value,
}

fn scene_value(s: &SceneSession) -> Value {
    serde_json::from_slice(&save_scene(&s.global, scene_meta(s))).expect("scene json")
}

pub fn scene_meta(s: &SceneSession) -> SceneMeta {
    SceneMeta {
        created: None,
        seed: s.last_step().map(|r| r.seed),
        step_count: s.steps_done(),
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    require_text(&req.text)?;
    let id = format!("session-{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let backend = state.backend.clone();
    let sid = id.clone();
    let session = tokio::task::spawn_blocking(move || -> ApiResult<SceneSession> {
        let mut s = SceneSession::new(sid);
        s.run_step(backend.as_ref(), None, &req.text, req.seed)?;
        Ok(s)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let Some(LogEntry::Step(rec)) = session.log.last() else {
        unreachable!("a fresh session holds its first step")
    };
    let body = Created {
        session_id: id.clone(),
        revision: session.global.revision(),
        step: StepOutcome {
            step_index: 0,
            new_nids: rec.merge_result.new_nids(),
            report: rec.merge_result.report.clone(),
            repairs: rec.repairs.clone(),
            warnings: rec.warnings.clone(),
            revision: session.global.revision(),
        },
        scene: scene_value(&session),
    };
    let revision = session.global.revision();
    state
        .sessions
        .write()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok(with_revision(
        revision,
        StatusCode::CREATED,
        serde_json::to_vec(&body).expect("json"),
    ))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = state.snapshot(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    let meta = scene_meta(&s);
    Ok(with_revision(s.global.revision(), StatusCode::OK, save_session(&s, meta)))
}

async fn get_scene(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = state.snapshot(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    Ok(with_revision(
        s.global.revision(),
        StatusCode::OK,
        save_scene(&s.global, scene_meta(&s)),
    ))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct GraphNode {
    nid: Nid,
    category: String,
    parent: Option<Nid>,
    depth: usize,
    children: Vec<Nid>,
}

async fn get_graph(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = state.snapshot(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    let g = &s.global;
    let nodes: Vec<GraphNode> = g
        .nodes()
        .map(|n| GraphNode {
            nid: n.nid,
            category: n.category.clone(),
            parent: g.strong_parent(n.nid),
            depth: g.strong_depth(n.nid),
            children: g.strong_children(n.nid),
        })
        .collect();
    let body = json!({
        "revision": g.revision(),
        "roots": g.strong_roots(),
        "nodes": nodes,
        "edges": g.edges().collect::<Vec<_>>(),
        "violations": g.validate(),
    });
    Ok(with_revision(g.revision(), StatusCode::OK, serde_json::to_vec(&body).expect("json")))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StepRequest {
    pub anchor: Nid,
    pub text: String,
    /// Defaults to the step index.
    #[serde(default)]
    pub seed: Option<u64>,
}

async fn post_step(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<StepRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    require_text(&req.text)?;
    let expected = if_match(&headers)?;
    let backend = state.backend.clone();
    let outcome = mutate(&state, &id, expected, move |s| {
        let seed = req.seed.unwrap_or(u64::from(s.steps_done()));
        Ok(s.run_step(backend.as_ref(), Some(req.anchor), &req.text, seed)?)
    })
    .await?;
    let body = json!({ "revision": outcome.revision, "step": outcome });
    Ok(with_revision(outcome.revision, StatusCode::OK, serde_json::to_vec(&body).expect("json")))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PoseEdit {
    #[serde(default)]
    pub pos: Option<Vec3>,
    /// (roll, pitch, yaw); wins over `yaw`.
    #[serde(default)]
    pub rot: Option<Vec3>,
    #[serde(default)]
    pub yaw: Option<f64>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct Edited {
    revision: u64,
    report: LayoutReport,
}

async fn patch_node(
    State(state): State<Arc<AppState>>,
    Path((id, nid)): Path<(String, Nid)>,
    headers: HeaderMap,
    body: Result<Json<PoseEdit>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(edit) = body?;
    if edit.pos.is_none() && edit.rot.is_none() && edit.yaw.is_none() {
        return Err(ApiError::invalid("give at least one of pos, rot, yaw"));
    }
    let expected = if_match(&headers)?;
    let out = mutate(&state, &id, expected, move |s| {
        let node = s
            .global
            .node(nid)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknownNode", format!("no node {nid}")))?;
        let pos = edit.pos.unwrap_or(node.pos);
        let mut rot = edit.rot.unwrap_or(node.rot);
        if let (None, Some(yaw)) = (edit.rot, edit.yaw) {
            rot.z = yaw;
        }
        let report = s.modify_node_pose(nid, pos, rot)?;
        Ok(Edited {
            revision: s.global.revision(),
            report,
        })
    })
    .await?;
    Ok(with_revision(out.revision, StatusCode::OK, serde_json::to_vec(&out).expect("json")))
}

#[derive(Debug, Deserialize)]
pub struct RemoveQuery {
    #[serde(default)]
    pub cascade: bool,
}

async fn delete_node(
    State(state): State<Arc<AppState>>,
    Path((id, nid)): Path<(String, Nid)>,
    headers: HeaderMap,
    query: Result<Query<RemoveQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query?;
    let expected = if_match(&headers)?;
    let (revision, removed) = mutate(&state, &id, expected, move |s| {
        let removed = s.remove_node(nid, q.cascade)?;
        Ok((s.global.revision(), removed))
    })
    .await?;
    let body = json!({ "revision": revision, "removed": removed });
    Ok(with_revision(revision, StatusCode::OK, serde_json::to_vec(&body).expect("json")))
}

async fn get_report(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = state.snapshot(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    let revision = s.global.revision();
    let body = match s.log.last() {
        Some(LogEntry::Step(r)) => json!({
            "revision": revision,
            "op": "step",
            "stepIndex": r.step_index,
            "newNids": r.merge_result.new_nids(),
            "report": r.merge_result.report,
            "repairs": r.repairs,
            "warnings": r.warnings,
        }),
        Some(LogEntry::EditPose { nid, report, .. }) => json!({
            "revision": revision,
            "op": "editPose",
            "nid": nid,
            "report": report,
        }),
        Some(LogEntry::Remove { nid, removed, .. }) => json!({
            "revision": revision,
            "op": "remove",
            "nid": nid,
            "removed": removed,
        }),
        None => json!({ "revision": revision, "op": null }),
    };
    Ok(with_revision(revision, StatusCode::OK, serde_json::to_vec(&body).expect("json")))
}
