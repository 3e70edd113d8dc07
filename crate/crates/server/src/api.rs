//! JSON-over-HTTP front end for [`SessionStore`].
//!
//! Every handler runs its store call on the blocking pool, so a long
//! retrain never stalls label submissions on other connections.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;
use vadecide_core::audit::{import_tree, AuditTreeExport, ConflictItem, ConflictStatus, ResolutionRequest};
use vadecide_core::domain::{FeatureVector, IncidentCategory, Parcel, ParcelId, ParcelKind, FEATURE_NAMES};
use vadecide_core::evaluate::MetricsReport;
use vadecide_core::forest::{decision_path, LeafCounts};
use vadecide_core::labels::{LabelRecord, Provenance};
use vadecide_core::sampler::{Mix, SamplingBatch};
use vadecide_core::session::{
    export_sheet, AcceptanceReport, LabelInput, Prediction, Round, RoundState, Session, SessionConfig, SessionError,
    SessionStore, SnapshotInfo,
};

/// Header carrying the caller's annotator id on label submissions.
pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
}

pub fn router(store: Arc<SessionStore>, static_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/health", get(health))
        .route("/datasets", get(list_datasets))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/batches", post(request_batch))
        .route("/sessions/{id}/conflicts", get(list_conflicts))
        .route("/sessions/{id}/audit", get(audit_trees))
        .route("/sessions/{id}/train", post(train))
        .route("/sessions/{id}/predictions", get(predictions))
        .route("/sessions/{id}/report", get(report))
        .route("/batches/{id}", get(get_batch))
        .route("/batches/{id}/labels", post(submit_labels))
        .route("/batches/{id}/sheet", get(batch_sheet))
        .route("/conflicts/{id}/resolution", post(resolve_conflict))
        .route("/parcels/{id}", get(get_parcel))
        .with_state(AppState { store });
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// `{code, message, detail}` with a status chosen from the code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "DatasetMissing" | "UnknownSession" | "UnknownBatch" | "UnknownConflict" | "UnknownParcel" => {
            StatusCode::NOT_FOUND
        }
        "NotAssigned" => StatusCode::FORBIDDEN,
        "DuplicateSubmission" | "SessionClosed" | "RoundClosed" | "InvalidState" | "AlreadyResolved"
        | "NotTrained" | "PoolExhausted" => StatusCode::CONFLICT,
        "NoLabels" | "SingleClass" => StatusCode::UNPROCESSABLE_ENTITY,
        "BadAssignment" | "InvalidRecord" | "MixInvalid" | "InvalidConfig" | "MalformedSheet"
        | "UnknownParcelColumn" | "BadLabelToken" | "BadRequest" | "MissingAnnotator" => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let code = e.code();
        let detail = match &e {
            SessionError::PoolExhausted { requested, available } => {
                json!({ "requested": requested, "available": available })
            }
            SessionError::NotAssigned { annotator, parcel, round }
            | SessionError::DuplicateSubmission { annotator, parcel, round } => {
                json!({ "annotator_id": annotator, "parcel_id": parcel, "round": round })
            }
            SessionError::BadLabelToken { column, token } => json!({ "column": column, "token": token }),
            SessionError::SingleClass(kind) => json!({ "kind": kind }),
            SessionError::RoundClosed(round) => json!({ "round": round }),
            SessionError::DatasetMissing(id)
            | SessionError::UnknownSession(id)
            | SessionError::UnknownBatch(id)
            | SessionError::UnknownConflict(id)
            | SessionError::SessionClosed(id)
            | SessionError::UnknownParcelColumn(id) => json!({ "id": id }),
            _ => Value::Null,
        };
        ApiError {
            status: status_for(code),
            code: code.to_string(),
            message: e.to_string(),
            detail,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, axum::Json(body)).into_response()
    }
}

#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
struct Body<T>(T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
struct Query<T>(T);

type ApiResult<T> = Result<axum::Json<T>, ApiError>;

async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&SessionStore) -> Result<T, ApiError> + Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn health() -> axum::Json<Value> {
    axum::Json(json!({ "status": "ok" }))
}

async fn list_datasets(State(st): State<AppState>) -> axum::Json<Vec<String>> {
    axum::Json(st.store.dataset_names())
}

async fn list_sessions(State(st): State<AppState>) -> ApiResult<Vec<String>> {
    Ok(axum::Json(blocking(&st, |s| Ok(s.session_ids()?)).await?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundView {
    pub round: u32,
    pub batch_id: String,
    pub state: RoundState,
    pub n_parcels: usize,
    pub assignments: BTreeMap<String, usize>,
    pub remaining: usize,
}

impl From<&Round> for RoundView {
    fn from(r: &Round) -> Self {
        RoundView {
            round: r.round,
            batch_id: r.batch_id().to_string(),
            state: r.state,
            n_parcels: r.batch.parcel_ids.len(),
            assignments: r.assignments.iter().map(|(a, ids)| (a.clone(), ids.len())).collect(),
            remaining: r.remaining(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub dataset: String,
    pub created_at: DateTime<Utc>,
    pub closed: bool,
    pub pool_size: usize,
    pub remaining_pool: usize,
    pub record_count: usize,
    pub label_count: usize,
    pub open_conflicts: usize,
    pub rounds: Vec<RoundView>,
    pub snapshots: Vec<SnapshotInfo>,
    pub warnings: Vec<String>,
    pub config: SessionConfig,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        SessionView {
            session_id: s.id.clone(),
            dataset: s.dataset.clone(),
            created_at: s.created_at,
            closed: s.closed,
            pool_size: s.pool.len(),
            remaining_pool: s.remaining_pool().len(),
            record_count: s.log.len(),
            label_count: s.log.effective_labels().len(),
            open_conflicts: s.open_conflicts(),
            rounds: s.rounds.iter().map(RoundView::from).collect(),
            snapshots: s.snapshots.clone(),
            warnings: s.warnings.clone(),
            config: s.config.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    dataset: String,
    #[serde(default)]
    config: Option<SessionConfig>,
}

async fn create_session(State(st): State<AppState>, Body(req): Body<CreateSession>) -> Result<Response, ApiError> {
    let view = blocking(&st, move |s| {
        let session = s.create_session(&req.dataset, req.config.unwrap_or_default())?;
        Ok(SessionView::from(&session))
    })
    .await?;
    Ok((StatusCode::CREATED, axum::Json(view)).into_response())
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionView> {
    Ok(axum::Json(blocking(&st, move |s| Ok(s.read(&id, |s, _| SessionView::from(s))?)).await?))
}

#[derive(Debug, Deserialize)]
struct BatchRequest {
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    mix: Option<Mix>,
    assignments: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchView {
    pub session_id: String,
    #[serde(flatten)]
    pub batch: SamplingBatch,
    pub state: RoundState,
    pub assignments: BTreeMap<String, Vec<ParcelId>>,
    pub remaining: usize,
    /// Records submitted for this round, in log order.
    pub labels: Vec<LabelRecord>,
}

fn batch_view(s: &Session, r: &Round) -> BatchView {
    BatchView {
        session_id: s.id.clone(),
        batch: r.batch.clone(),
        state: r.state,
        assignments: r.assignments.clone(),
        remaining: r.remaining(),
        labels: s
            .log
            .records()
            .iter()
            .filter(|rec| rec.round == r.round && rec.provenance != Provenance::Resolution)
            .cloned()
            .collect(),
    }
}

async fn request_batch(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<BatchRequest>,
) -> Result<Response, ApiError> {
    let view = blocking(&st, move |s| {
        let n = match req.n {
            Some(n) => n,
            None => req.assignments.values().sum(),
        };
        let round = s.request_batch(&id, n, req.mix, &req.assignments)?;
        Ok(s.read(&id, |sess, _| batch_view(sess, &round))?)
    })
    .await?;
    Ok((StatusCode::CREATED, axum::Json(view)).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct AnnotatorQuery {
    #[serde(default)]
    annotator: Option<String>,
}

async fn get_batch(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> ApiResult<BatchView> {
    let view = blocking(&st, move |s| {
        let sid = s.session_for_batch(&id)?;
        let found = s.read(&sid, |sess, _| sess.batch(&id).map(|r| batch_view(sess, r)))?;
        found.ok_or_else(|| SessionError::UnknownBatch(id.clone()).into())
    })
    .await?;
    Ok(axum::Json(match q.annotator {
        Some(a) => BatchView {
            assignments: view.assignments.into_iter().filter(|(k, _)| *k == a).collect(),
            labels: view.labels.into_iter().filter(|l| l.annotator_id == a).collect(),
            ..view
        },
        None => view,
    }))
}

/// The batch (or one annotator's slice of it) as a transposed sheet, with
/// that annotator's submitted labels filled in.
async fn batch_sheet(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> Result<Response, ApiError> {
    let csv = blocking(&st, move |s| {
        let sid = s.session_for_batch(&id)?;
        let out = s.read(&sid, |sess, entry| -> Result<Vec<u8>, SessionError> {
            let r = sess.batch(&id).ok_or_else(|| SessionError::UnknownBatch(id.clone()))?;
            let ids: Vec<ParcelId> = match &q.annotator {
                Some(a) => r.assignments.get(a).cloned().unwrap_or_default(),
                None => r.batch.parcel_ids.clone(),
            };
            let mut filled = BTreeMap::new();
            for rec in sess.log.records() {
                if rec.round == r.round && q.annotator.as_ref().is_none_or(|a| *a == rec.annotator_id) {
                    filled.insert(rec.parcel_id.clone(), (Some(rec.value), rec.comment.clone()));
                }
            }
            let mut buf = Vec::new();
            export_sheet(&ids, &entry.dataset, Some(&filled), &mut buf)?;
            Ok(buf)
        })??;
        Ok(out)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

#[derive(Debug, Deserialize)]
struct LabelSubmission {
    labels: Vec<LabelInput>,
}

async fn submit_labels(
    State(st): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Body(req): Body<LabelSubmission>,
) -> ApiResult<AcceptanceReport> {
    let annotator = headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "MissingAnnotator",
                format!("the {ANNOTATOR_HEADER} header is required"),
            )
        })?
        .to_string();
    let report = blocking(&st, move |s| {
        Ok(s.submit_labels(&id, &annotator, &req.labels, Provenance::Expert)?)
    })
    .await?;
    Ok(axum::Json(report))
}

#[derive(Debug, Default, Deserialize)]
struct ConflictQuery {
    #[serde(default)]
    status: Option<ConflictStatus>,
}

async fn list_conflicts(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ConflictQuery>,
) -> ApiResult<Vec<ConflictItem>> {
    let all = blocking(&st, move |s| Ok(s.conflicts(&id)?)).await?;
    Ok(axum::Json(
        all.into_iter().filter(|c| q.status.is_none_or(|st| c.status == st)).collect(),
    ))
}

/// The latest audit tree per kind, as node lists plus DOT.
async fn audit_trees(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<BTreeMap<ParcelKind, AuditTreeExport>> {
    Ok(axum::Json(blocking(&st, move |s| Ok(s.read(&id, |sess, _| sess.audit_trees.clone())?)).await?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResolutionView {
    pub conflict: ConflictItem,
    pub records: Vec<LabelRecord>,
}

async fn resolve_conflict(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<ResolutionRequest>,
) -> ApiResult<ResolutionView> {
    let view = blocking(&st, move |s| {
        let records = s.resolve_conflict(&id, req)?;
        let sid = s.session_for_conflict(&id)?;
        let conflict = s
            .read(&sid, |sess, _| sess.conflicts.get(&id).cloned())?
            .ok_or_else(|| SessionError::UnknownConflict(id.clone()))?;
        Ok(ResolutionView { conflict, records })
    })
    .await?;
    Ok(axum::Json(view))
}

#[derive(Debug, Default, Deserialize)]
struct TrainRequest {
    #[serde(default)]
    force: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainView {
    pub snapshot: SnapshotInfo,
    /// Warnings logged by this request, such as a forced audit skip.
    pub warnings: Vec<String>,
}

async fn train(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<TrainView> {
    let req: TrainRequest = if body.iter().all(u8::is_ascii_whitespace) {
        TrainRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e.to_string()))?
    };
    let view = blocking(&st, move |s| {
        let before = s.read(&id, |sess, _| sess.warnings.len())?;
        let snapshot = s.retrain(&id, req.force)?;
        let warnings = s.read(&id, |sess, _| sess.warnings[before.min(sess.warnings.len())..].to_vec())?;
        Ok(TrainView { snapshot, warnings })
    })
    .await?;
    Ok(axum::Json(view))
}

#[derive(Debug, Default, Deserialize)]
struct PredictionQuery {
    #[serde(default)]
    kind: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRow {
    pub parcel_id: ParcelId,
    #[serde(flatten)]
    pub prediction: Prediction,
    pub vad: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionsView {
    pub snapshot_id: String,
    pub threshold: f64,
    pub kind: Option<ParcelKind>,
    pub predictions: Vec<PredictionRow>,
}

async fn predictions(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PredictionQuery>,
) -> ApiResult<PredictionsView> {
    let kind = match q.kind.as_deref().filter(|k| !k.is_empty()) {
        Some(k) => Some(ParcelKind::parse(k).ok_or_else(|| {
            ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", format!("unknown kind {k:?}"))
        })?),
        None => None,
    };
    let view = blocking(&st, move |s| {
        Ok(s.read(&id, |sess, _| {
            let snap = sess.latest_snapshot().ok_or(SessionError::NotTrained)?;
            let t = sess.config.threshold;
            Ok::<_, SessionError>(PredictionsView {
                snapshot_id: snap.snapshot_id.clone(),
                threshold: t,
                kind,
                predictions: sess
                    .predictions()
                    .iter()
                    .filter(|(_, p)| kind.is_none_or(|k| p.kind == k))
                    .map(|(pid, p)| PredictionRow {
                        parcel_id: pid.clone(),
                        prediction: *p,
                        vad: p.probability >= t,
                    })
                    .collect(),
            })
        })??)
    })
    .await?;
    Ok(axum::Json(view))
}

async fn report(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<MetricsReport> {
    Ok(axum::Json(blocking(&st, move |s| Ok(s.report(&id)?)).await?))
}

#[derive(Debug, Default, Deserialize)]
struct ParcelQuery {
    #[serde(default)]
    session: Option<String>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct IncidentSummary {
    pub count: usize,
    pub active: usize,
    pub amount: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathStepView {
    pub feature: usize,
    pub feature_name: String,
    pub threshold: f64,
    pub went_left: bool,
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathView {
    pub kind: ParcelKind,
    pub steps: Vec<PathStepView>,
    pub leaf: LeafCounts,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParcelView {
    pub parcel: Parcel,
    pub features: Option<FeatureVector>,
    pub incidents: BTreeMap<IncidentCategory, IncidentSummary>,
    pub session_id: Option<String>,
    /// Path through the latest audit tree for the parcel's kind.
    pub decision_path: Option<PathView>,
    pub prediction: Option<Prediction>,
    pub labels: Vec<LabelRecord>,
}

fn unknown_parcel(id: &str) -> ApiError {
    ApiError {
        detail: json!({ "id": id }),
        ..ApiError::new(StatusCode::NOT_FOUND, "UnknownParcel", format!("unknown parcel {id}"))
    }
}

async fn get_parcel(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ParcelQuery>,
) -> ApiResult<ParcelView> {
    let view = blocking(&st, move |s| {
        let pid = ParcelId::new(id.clone());
        let describe = |sess: Option<&Session>, ds: &vadecide_core::domain::Dataset| -> Result<ParcelView, ApiError> {
            let parcel = ds.parcel(&pid).ok_or_else(|| unknown_parcel(&id))?.clone();
            let features = ds.feature(&pid).cloned();
            let mut incidents: BTreeMap<IncidentCategory, IncidentSummary> = BTreeMap::new();
            for i in ds.incidents_of(&pid) {
                let e = incidents.entry(i.category).or_default();
                e.count += 1;
                e.active += usize::from(i.active);
                e.amount += i.amount;
            }
            let mut view = ParcelView {
                parcel,
                features,
                incidents,
                session_id: sess.map(|s| s.id.clone()),
                decision_path: None,
                prediction: None,
                labels: Vec::new(),
            };
            if let Some(sess) = sess {
                let kind = view.parcel.kind;
                if let (Some(export), Some(f)) = (sess.audit_trees.get(&kind), &view.features) {
                    let tree = import_tree(&export.nodes).map_err(|e| ApiError::internal(e.to_string()))?;
                    let path = decision_path(&tree, &f.to_array());
                    view.decision_path = Some(PathView {
                        kind,
                        steps: path
                            .steps
                            .iter()
                            .map(|st| {
                                let name = FEATURE_NAMES.get(st.feature).copied().unwrap_or("?").to_string();
                                let op = if st.went_left { "<=" } else { ">" };
                                PathStepView {
                                    feature: st.feature,
                                    description: format!("{name} {op} {}", st.threshold),
                                    feature_name: name,
                                    threshold: st.threshold,
                                    went_left: st.went_left,
                                }
                            })
                            .collect(),
                        leaf: path.leaf,
                    });
                }
                view.prediction = sess.predictions().get(&pid).cloned();
                view.labels = sess.log.history(&pid).into_iter().cloned().collect();
            }
            Ok(view)
        };
        match q.session {
            Some(sid) => s.read(&sid, |sess, entry| describe(Some(sess), &entry.dataset))?,
            None => {
                let names = s.dataset_names();
                let entries: Vec<_> = names.iter().filter_map(|n| s.dataset(n).ok()).collect();
                let found = entries.iter().find(|e| e.dataset.parcel(&pid).is_some());
                match found {
                    Some(e) => describe(None, &e.dataset),
                    None => Err(unknown_parcel(&id)),
                }
            }
        }
    })
    .await?;
    Ok(axum::Json(view))
}
