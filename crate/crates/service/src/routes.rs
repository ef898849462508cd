use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use followup_core::report::{render_report, ReportFormat};
use followup_core::session::{EngineError, FieldStatus, Modality, PatientProfile, Phase, Session, Speaker, StepOutcome, Turn};
use followup_core::template::{FieldKind, FieldSpec, Template};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{error, info};

use crate::state::{AppState, FollowupTask, SessionSlot, TaskStatus};

pub const SCHEMA_VERSION: &str = "1";
pub const MAX_ANSWER_CHARS: usize = 4000;
const RETRY_AFTER_SECS: &str = "1";

#[derive(Debug, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({
            "schema_version": SCHEMA_VERSION,
            "error": {"code": self.code, "message": self.message},
        }));
        let mut resp = (self.status, body).into_response();
        if self.status == StatusCode::TOO_MANY_REQUESTS {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from_static(RETRY_AFTER_SECS));
        }
        resp
    }
}

fn ok(status: StatusCode, mut body: Value) -> Response {
    body["schema_version"] = json!(SCHEMA_VERSION);
    (status, Json(body)).into_response()
}

#[derive(Debug, Serialize)]
pub struct FieldView<'a> {
    pub id: &'a str,
    pub label: &'a str,
    pub kind: FieldKind,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    pub options: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl<'a> From<&'a FieldSpec> for FieldView<'a> {
    fn from(f: &'a FieldSpec) -> Self {
        Self {
            id: &f.id,
            label: &f.label,
            kind: f.kind,
            options: &f.options,
            unit: f.unit.as_deref(),
            min: f.min,
            max: f.max,
        }
    }
}

/// The field being asked, when the session tracks fields.
fn current_field<'t>(session: &Session, template: &'t Template) -> Option<FieldView<'t>> {
    if session.phase != Phase::Active || !session.config.field_tracking {
        return None;
    }
    session.current_field_id().and_then(|id| template.field(id)).map(FieldView::from)
}

fn turn_json(t: &Turn) -> Value {
    json!({
        "index": t.index,
        "speaker": t.speaker,
        "text": t.text,
        "modality": t.modality,
        "field_ids": t.field_ids,
        "degraded": t.degraded,
        "timestamp": t.timestamp,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateTask {
    pub patient: PatientProfile,
    pub template_id: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

/// Queue a task. Returns the task and whether it was newly created.
pub fn create_task(state: &AppState, req: CreateTask) -> Result<(FollowupTask, bool), ApiError> {
    req.patient.validate().map_err(ApiError::bad_request)?;
    if state.template(&req.template_id).is_none() {
        return Err(ApiError::not_found(format!("unknown template \"{}\"", req.template_id)));
    }
    let mut tasks = state.tasks.lock().unwrap();
    if let Some(key) = &req.idempotency_key {
        if let Some(t) = tasks.values().find(|t| t.idempotency_key.as_ref() == Some(key)) {
            return Ok((t.clone(), false));
        }
    }
    let task = FollowupTask {
        task_id: format!("task-{:06}", state.next_id()),
        patient: req.patient,
        template_id: req.template_id,
        status: TaskStatus::Queued,
        session_id: None,
        idempotency_key: req.idempotency_key,
    };
    state.save_task(&task).map_err(|e| ApiError::internal(e.to_string()))?;
    tasks.insert(task.task_id.clone(), task.clone());
    info!(task = %task.task_id, template = %task.template_id, "task queued");
    Ok((task, true))
}

async fn healthz() -> Response {
    ok(StatusCode::OK, json!({"status": "ok"}))
}

async fn post_task(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Json<Value>) -> Result<Response, ApiError> {
    let mut req: CreateTask = serde_json::from_value(body.0).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if req.idempotency_key.is_none() {
        req.idempotency_key = headers
            .get("idempotency-key")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
    }
    let (task, created) = create_task(&state, req)?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok(ok(status, json!({"task_id": task.task_id, "status": task.status, "task": task})))
}

async fn get_task(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let tasks = state.tasks.lock().unwrap();
    let task = tasks.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown task \"{id}\"")))?;
    Ok(ok(StatusCode::OK, json!({"task": task})))
}

async fn start_session(State(state): State<Arc<AppState>>, Path(task_id): Path<String>) -> Result<Response, ApiError> {
    let session_id = format!("sess-{:06}", state.next_id());
    // reserve the task so a concurrent start sees a conflict
    let task = {
        let mut tasks = state.tasks.lock().unwrap();
        let task = tasks
            .get_mut(&task_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown task \"{task_id}\"")))?;
        if task.status != TaskStatus::Queued {
            return Err(ApiError::conflict(format!("task {task_id} is {:?}", task.status).to_lowercase()));
        }
        task.status = TaskStatus::Active;
        task.session_id = Some(session_id.clone());
        task.clone()
    };
    let revert = |state: &AppState| {
        if let Some(t) = state.tasks.lock().unwrap().get_mut(&task_id) {
            t.status = TaskStatus::Queued;
            t.session_id = None;
        }
    };
    let Some(template) = state.template(&task.template_id) else {
        revert(&state);
        return Err(ApiError::not_found(format!("template \"{}\" no longer exists", task.template_id)));
    };
    let engine = state.engine(template.clone());
    let (profile, cfg) = (task.patient.clone(), state.config.engine.clone());
    let seed = state.config.seed ^ state.next_id();
    let sid = session_id.clone();
    let started = tokio::task::spawn_blocking(move || engine.start_session(sid, profile, cfg, seed))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let (session, first) = match started {
        Ok(v) => v,
        Err(e) => {
            revert(&state);
            return Err(engine_error(e));
        }
    };
    if let Err(e) = state.save_task(&task) {
        error!(task = %task_id, error = %e, "task not persisted");
    }
    let body = json!({
        "session_id": session_id,
        "task_id": task_id,
        "first_prompt": turn_json(&first),
        "current_field": current_field(&session, &template),
        "completed": false,
    });
    state.insert_session(
        session_id.clone(),
        SessionSlot {
            task_id,
            template,
            session: Arc::new(tokio::sync::Mutex::new(session)),
        },
    );
    Ok(ok(StatusCode::CREATED, body))
}

fn engine_error(e: EngineError) -> ApiError {
    match e {
        EngineError::NotActive(_) | EngineError::NoFieldInProgress => ApiError::conflict(e.to_string()),
        EngineError::InvalidInput(_) => ApiError::bad_request(e.to_string()),
        EngineError::UnknownField(_) => ApiError::not_found(e.to_string()),
        other => ApiError::internal(other.to_string()),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Answer {
    #[serde(default = "default_modality")]
    modality: Modality,
    text: String,
}

fn default_modality() -> Modality {
    Modality::Text
}

fn slot(state: &AppState, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
    state.session(id).ok_or_else(|| ApiError::not_found(format!("unknown session \"{id}\"")))
}

async fn submit_answer(
    State(state): State<Arc<AppState>>,
    Path(session_id): Path<String>,
    body: Json<Value>,
) -> Result<Response, ApiError> {
    let answer: Answer = serde_json::from_value(body.0).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if answer.text.chars().count() > MAX_ANSWER_CHARS {
        return Err(ApiError::bad_request(format!("answer longer than {MAX_ANSWER_CHARS} characters")));
    }
    let slot = slot(&state, &session_id)?;
    let mut guard = slot.session.clone().try_lock_owned().map_err(|_| {
        ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "busy",
            "another answer for this session is being processed",
        )
    })?;
    if guard.phase != Phase::Active {
        return Err(ApiError::conflict(format!("session {session_id} is complete")));
    }
    let engine = state.engine(slot.template.clone());
    let (guard, outcome) = tokio::task::spawn_blocking(move || {
        let out = engine.submit_answer(&mut guard, &answer.text, answer.modality);
        (guard, out)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let outcome = outcome.map_err(engine_error)?;
    let session: &Session = &guard;
    let body = match outcome {
        StepOutcome::Reprompt(turn) => json!({
            "session_id": session_id,
            "completed": false,
            "reprompt": true,
            "next_prompt": turn_json(&turn),
            "current_field": current_field(session, &slot.template),
        }),
        StepOutcome::NextTurn { turn, finished_field } => json!({
            "session_id": session_id,
            "completed": false,
            "reprompt": false,
            "next_prompt": turn_json(&turn),
            "current_field": current_field(session, &slot.template),
            "finished_field": finished_field,
        }),
        StepOutcome::SessionComplete { finished_field, report_id } => {
            let task = {
                let mut tasks = state.tasks.lock().unwrap();
                tasks.get_mut(&slot.task_id).map(|t| {
                    t.status = TaskStatus::Done;
                    t.clone()
                })
            };
            if let Some(t) = task {
                if let Err(e) = state.save_task(&t) {
                    error!(task = %t.task_id, error = %e, "task not persisted");
                }
            }
            json!({
                "session_id": session_id,
                "completed": true,
                "reprompt": false,
                "finished_field": finished_field,
                "report_id": report_id,
            })
        }
    };
    Ok(ok(StatusCode::OK, body))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let slot = slot(&state, &id)?;
    let s = slot.session.lock().await;
    let fields: Vec<Value> = slot
        .template
        .ordered_fields()
        .into_iter()
        .map(|f| {
            let st = s.state(&f.id);
            json!({
                "field": FieldView::from(f),
                "status": st.map_or(FieldStatus::Pending, |x| x.status),
                "attempts": st.map_or(0, |x| x.attempts),
            })
        })
        .collect();
    let p = &s.profile;
    Ok(ok(
        StatusCode::OK,
        json!({
            "session_id": s.session_id,
            "task_id": slot.task_id,
            "template_id": s.template_id,
            "phase": s.phase,
            "completed": s.phase == Phase::Done,
            "patient": {
                "bed_number": p.bed_number,
                "age": p.age,
                "sex": p.sex,
                "surgery_type": p.surgery_type,
                "surgery_date": p.surgery_date,
            },
            "transcript": s.transcript.iter().map(turn_json).collect::<Vec<_>>(),
            "last_prompt": s.transcript.iter().rev().find(|t| t.speaker == Speaker::Robot).map(turn_json),
            "current_field": current_field(&s, &slot.template),
            "fields": fields,
            "report_id": s.report.as_ref().map(|r| r.report_id.clone()),
        }),
    ))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    format: Option<String>,
}

async fn get_report(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> Result<Response, ApiError> {
    let format: ReportFormat = q
        .format
        .as_deref()
        .unwrap_or("structured")
        .parse()
        .map_err(|e: String| ApiError::bad_request(e))?;
    let slot = slot(&state, &id)?;
    let s = slot.session.lock().await;
    if s.phase != Phase::Done {
        return Err(ApiError::conflict(format!("session {id} is still in progress")));
    }
    let report = match &s.report {
        Some(r) => r.clone(),
        None => state.engine(slot.template.clone()).report(&s).map_err(engine_error)?,
    };
    Ok(match format {
        ReportFormat::Structured => ok(StatusCode::OK, json!({"format": "structured", "report": report})),
        ReportFormat::HumanReadable => (
            StatusCode::OK,
            [
                (header::CONTENT_TYPE, "text/plain; charset=utf-8"),
                (header::HeaderName::from_static("x-schema-version"), SCHEMA_VERSION),
            ],
            render_report(&report, format),
        )
            .into_response(),
    })
}

async fn list_templates(State(state): State<Arc<AppState>>) -> Response {
    let list: Vec<Value> = state
        .templates()
        .iter()
        .map(|t| {
            json!({
                "template_id": t.template_id,
                "version": t.version,
                "report_title": t.report_title,
                "field_count": t.fields.len(),
            })
        })
        .collect();
    ok(StatusCode::OK, json!({"templates": list}))
}

async fn get_template(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let t = state
        .template(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown template \"{id}\"")))?;
    Ok(ok(StatusCode::OK, json!({"template": *t})))
}

async fn post_template(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Result<Response, ApiError> {
    let t = followup_core::template::parse_template(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let id = t.template_id.clone();
    let created = state.put_template(t).map_err(ApiError::conflict)?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok(ok(status, json!({"template_id": id, "created": created})))
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.bearer_token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/tasks", post(post_task))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/session", post(start_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/answers", post(submit_answer))
        .route("/sessions/{id}/report", get(get_report))
        .route("/templates", get(list_templates).post(post_template))
        .route("/templates/{id}", get(get_template))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(protected)
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}
