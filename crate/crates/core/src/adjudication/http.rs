use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AdjudicationCase, AdjudicationError, AdjudicationStore, CaseStatus, Decision, Verdict};

/// Header carrying the reviewer id when the body leaves it out.
pub const REVIEWER_HEADER: &str = "x-reviewer-id";

type Clock = Arc<dyn Fn() -> String + Send + Sync>;

/// Shared state behind the review API.
#[derive(Clone)]
pub struct ReviewService {
    store: Arc<Mutex<AdjudicationStore>>,
    blind: bool,
    clock: Clock,
}

impl ReviewService {
    pub fn new(store: AdjudicationStore, blind: bool) -> Self {
        Self {
            store: Arc::new(Mutex::new(store)),
            blind,
            clock: Arc::new(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
        }
    }

    /// Replace the timestamp source.
    pub fn with_clock(mut self, clock: impl Fn() -> String + Send + Sync + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    pub fn store(&self) -> Arc<Mutex<AdjudicationStore>> {
        Arc::clone(&self.store)
    }

    fn view(&self, case: &AdjudicationCase) -> AdjudicationCase {
        let mut case = case.clone();
        if self.blind {
            case.gold_names.clear();
            for v in &mut case.verdicts {
                v.gold_linkage = None;
            }
        }
        case
    }
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1, "message": self.2 }))).into_response()
    }
}

impl From<AdjudicationError> for ApiError {
    fn from(e: AdjudicationError) -> Self {
        let (status, kind) = match &e {
            AdjudicationError::UnknownCase(_) => (StatusCode::NOT_FOUND, "UnknownCase"),
            AdjudicationError::CaseClosed(_) => (StatusCode::CONFLICT, "CaseClosed"),
            AdjudicationError::DuplicateReviewer { .. } => (StatusCode::CONFLICT, "DuplicateReviewer"),
            AdjudicationError::PrematureAdjudication(_) => (StatusCode::CONFLICT, "PrematureAdjudication"),
            AdjudicationError::MissingReason => (StatusCode::UNPROCESSABLE_ENTITY, "MissingReason"),
            AdjudicationError::EmptyReviewer => (StatusCode::UNPROCESSABLE_ENTITY, "EmptyReviewer"),
            AdjudicationError::DuplicateCase { .. } => (StatusCode::CONFLICT, "DuplicateCase"),
            AdjudicationError::Io(_) | AdjudicationError::Corrupt(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "StoreError")
            }
        };
        ApiError(status, kind, e.to_string())
    }
}

fn lock_poisoned() -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, "StoreError", "store lock poisoned".into())
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
    page: Option<usize>,
    per_page: Option<usize>,
}

#[derive(Debug, Serialize)]
struct CaseSummary {
    case_id: String,
    doc_id: String,
    name: String,
    status: CaseStatus,
    verdict_count: usize,
}

#[derive(Debug, Serialize)]
struct CasePage {
    items: Vec<CaseSummary>,
    page: usize,
    per_page: usize,
    total: usize,
}

#[derive(Debug, Deserialize)]
struct VerdictBody {
    #[serde(default)]
    reviewer_id: Option<String>,
    decision: Decision,
    #[serde(default)]
    gold_linkage: Option<String>,
    #[serde(default)]
    reason: String,
    #[serde(default)]
    tie_break: bool,
}

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, "MalformedRequest", msg.into())
}

async fn list_cases(
    State(svc): State<ReviewService>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> Result<Json<CasePage>, ApiError> {
    let Query(q) = query.map_err(|e| unprocessable(e.body_text()))?;
    let status = match q.status.as_deref().filter(|s| !s.is_empty()) {
        Some(s) => Some(s.parse::<CaseStatus>().map_err(unprocessable)?),
        None => None,
    };
    let page = q.page.unwrap_or(1);
    let per_page = q.per_page.unwrap_or(50);
    if page == 0 || per_page == 0 || per_page > 1000 {
        return Err(unprocessable("page must be >= 1 and per_page in 1..=1000"));
    }
    let store = svc.store.lock().map_err(|_| lock_poisoned())?;
    let matching: Vec<&AdjudicationCase> = store
        .book()
        .cases()
        .filter(|c| status.is_none_or(|s| c.status == s))
        .collect();
    let items = matching
        .iter()
        .skip((page - 1) * per_page)
        .take(per_page)
        .map(|c| CaseSummary {
            case_id: c.case_id.clone(),
            doc_id: c.extraction.doc_id.clone(),
            name: c.extraction.name.clone(),
            status: c.status,
            verdict_count: c.verdicts.len(),
        })
        .collect();
    Ok(Json(CasePage { items, page, per_page, total: matching.len() }))
}

async fn get_case(State(svc): State<ReviewService>, Path(id): Path<String>) -> Result<Json<AdjudicationCase>, ApiError> {
    let store = svc.store.lock().map_err(|_| lock_poisoned())?;
    let case = store.book().get(&id).ok_or(AdjudicationError::UnknownCase(id))?;
    Ok(Json(svc.view(case)))
}

async fn post_verdict(
    State(svc): State<ReviewService>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<AdjudicationCase>), ApiError> {
    let body: VerdictBody = serde_json::from_slice(&body).map_err(|e| unprocessable(e.to_string()))?;
    let reviewer_id = body
        .reviewer_id
        .filter(|r| !r.trim().is_empty())
        .or_else(|| headers.get(REVIEWER_HEADER).and_then(|h| h.to_str().ok()).map(str::to_owned))
        .unwrap_or_default();
    let verdict = Verdict {
        reviewer_id: reviewer_id.trim().to_owned(),
        decision: body.decision,
        gold_linkage: body.gold_linkage.filter(|g| !g.trim().is_empty()),
        reason: body.reason,
        timestamp: (svc.clock)(),
    };
    let mut store = svc.store.lock().map_err(|_| lock_poisoned())?;
    let case = store.submit(&id, verdict, body.tie_break)?;
    Ok((StatusCode::OK, Json(svc.view(&case))))
}

async fn progress(State(svc): State<ReviewService>) -> Result<Json<BTreeMap<CaseStatus, usize>>, ApiError> {
    let store = svc.store.lock().map_err(|_| lock_poisoned())?;
    Ok(Json(store.book().progress()))
}

async fn export(State(svc): State<ReviewService>) -> Result<Response, ApiError> {
    let store = svc.store.lock().map_err(|_| lock_poisoned())?;
    if svc.blind {
        return Err(ApiError(StatusCode::FORBIDDEN, "BlindMode", "export is disabled in blind mode".into()));
    }
    Ok(Json(store.book().export_verdicts()).into_response())
}

pub fn router(service: ReviewService) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/verdicts", post(post_verdict))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .with_state(service)
}

/// Serve the review API on an already bound listener until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, service: ReviewService) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}
