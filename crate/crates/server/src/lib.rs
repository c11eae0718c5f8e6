//! HTTP interface over processed cases and review sessions.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use meningrade_core::aggregator::render_heatmap;
use meningrade_core::pipeline::load_processed;
use meningrade_core::review::{criterion_grid, default_heatmap_slide, derive, ActionBody, DerivedState, ProcessedCase, ReviewState};
use meningrade_core::session::{SessionManager, SessionState};
use meningrade_core::tiler::{encode_png_gray, encode_png_rgb, open_case, PyramidSlide};
use meningrade_core::{CriterionKind, Error, Rect};

/// Largest region (level pixels per side) served by the region endpoint.
pub const MAX_REGION_PX: u32 = 4096;

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::AtPatch { source, .. } => status_of(source),
        Error::NotFound(_) | Error::MissingFile(_) => StatusCode::NOT_FOUND,
        Error::Precondition(_) => StatusCode::CONFLICT,
        Error::Validation(_) | Error::Range(_) | Error::Unsupported(_) | Error::Contract(_) | Error::InvalidMetadata(_) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.0.code(), "message": self.0.to_string() });
        (status_of(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub struct CaseEntry {
    pub case_id: String,
    pub dir: PathBuf,
    pub processed: Option<Arc<ProcessedCase>>,
    initial: Option<DerivedState>,
}

pub struct AppState {
    cases: BTreeMap<String, CaseEntry>,
    slides: HashMap<String, PyramidSlide>,
    sessions: SessionManager,
}

fn is_case_dir(dir: &Path) -> bool {
    dir.join("processed.json").exists() || dir.join("manifest.json").exists()
}

impl AppState {
    /// Serves every case directory under `cases_root` (or `cases_root` itself when it
    /// is one). Directories without `processed.json` are listed as unprocessed.
    pub fn open(cases_root: &Path, sessions_root: &Path) -> meningrade_core::Result<Self> {
        let mut dirs = Vec::new();
        if is_case_dir(cases_root) {
            dirs.push(cases_root.to_path_buf());
        } else {
            let rd = std::fs::read_dir(cases_root).map_err(|_| Error::MissingFile(cases_root.to_path_buf()))?;
            for entry in rd.flatten() {
                let p = entry.path();
                if p.is_dir() && is_case_dir(&p) {
                    dirs.push(p);
                }
            }
            dirs.sort();
        }
        let mut cases = BTreeMap::new();
        let mut slides = HashMap::new();
        for dir in dirs {
            let entry = if dir.join("processed.json").exists() {
                let pc = load_processed(&dir)?;
                for s in open_case(Path::new(&pc.manifest_path))?.slides {
                    slides.insert(s.meta.slide_id.clone(), s);
                }
                let initial = derive(&pc, &ReviewState::default())?;
                CaseEntry { case_id: pc.case_id.clone(), dir, processed: Some(Arc::new(pc)), initial: Some(initial) }
            } else {
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                CaseEntry { case_id: name, dir, processed: None, initial: None }
            };
            if cases.contains_key(&entry.case_id) {
                return Err(Error::Validation(format!("case id `{}` is served twice", entry.case_id)));
            }
            cases.insert(entry.case_id.clone(), entry);
        }
        Ok(AppState { cases, slides, sessions: SessionManager::new(sessions_root)? })
    }

    pub fn sessions(&self) -> &SessionManager {
        &self.sessions
    }

    fn case(&self, case_id: &str) -> meningrade_core::Result<&CaseEntry> {
        self.cases.get(case_id).ok_or_else(|| Error::NotFound(format!("case {case_id}")))
    }

    fn processed(&self, case_id: &str) -> meningrade_core::Result<Arc<ProcessedCase>> {
        self.case(case_id)?
            .processed
            .clone()
            .ok_or_else(|| Error::Precondition(format!("case {case_id} has not been processed")))
    }

    /// A session held in memory, or reloaded from its log on first access.
    pub fn session(&self, sid: &str) -> meningrade_core::Result<SessionState> {
        if let Ok(s) = self.sessions.get(sid) {
            return Ok(s);
        }
        let meta = self.sessions.meta(sid)?;
        self.sessions.load(sid, self.processed(&meta.case_id)?)
    }

    fn view(&self, case_id: &str, session: Option<&str>) -> meningrade_core::Result<(ReviewState, DerivedState)> {
        let entry = self.case(case_id)?;
        match session {
            None => {
                let d = entry.initial.clone().ok_or_else(|| Error::Precondition(format!("case {case_id} has not been processed")))?;
                Ok((ReviewState::default(), d))
            }
            Some(sid) => {
                let s = self.session(sid)?;
                if s.case_id != case_id {
                    return Err(Error::Validation(format!("session {sid} belongs to case {}", s.case_id)));
                }
                Ok((s.review, s.derived))
            }
        }
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> meningrade_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Corruption(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

#[derive(Serialize)]
struct CaseListing {
    case_id: String,
    processed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    grade: Option<meningrade_core::grader::Grade>,
    slides: Vec<String>,
}

async fn list_cases(State(st): State<Shared>) -> Json<Vec<CaseListing>> {
    Json(
        st.cases
            .values()
            .map(|c| CaseListing {
                case_id: c.case_id.clone(),
                processed: c.processed.is_some(),
                grade: c.initial.as_ref().map(|d| d.grade.grade),
                slides: c.processed.as_ref().map_or(Vec::new(), |p| p.slides.iter().map(|s| s.slide_id.clone()).collect()),
            })
            .collect(),
    )
}

#[derive(Deserialize, Default)]
struct ViewQuery {
    session: Option<String>,
    slide: Option<String>,
    format: Option<String>,
}

fn parse_kind(s: &str) -> ApiResult<CriterionKind> {
    meningrade_core::review::parse_criterion(s).map_err(ApiError)
}

async fn grading(State(st): State<Shared>, UrlPath(id): UrlPath<String>, Query(q): Query<ViewQuery>) -> ApiResult<Response> {
    let (_, d) = st.view(&id, q.session.as_deref())?;
    Ok(Json(d.grade).into_response())
}

async fn evidence(
    State(st): State<Shared>,
    UrlPath((id, kind)): UrlPath<(String, String)>,
    Query(q): Query<ViewQuery>,
) -> ApiResult<Response> {
    let kind = parse_kind(&kind)?;
    let (_, d) = st.view(&id, q.session.as_deref())?;
    Ok(Json(d.evidence_for(kind).to_vec()).into_response())
}

async fn regions(State(st): State<Shared>, UrlPath(id): UrlPath<String>, Query(q): Query<ViewQuery>) -> ApiResult<Response> {
    let (_, d) = st.view(&id, q.session.as_deref())?;
    Ok(Json(d.regions).into_response())
}

async fn heatmap(
    State(st): State<Shared>,
    UrlPath((id, kind)): UrlPath<(String, String)>,
    Query(q): Query<ViewQuery>,
) -> ApiResult<Response> {
    let kind = parse_kind(&kind)?;
    let (review, _) = st.view(&id, q.session.as_deref())?;
    let pc = st.processed(&id)?;
    let slide_id = match q.slide {
        Some(s) => s,
        None => default_heatmap_slide(&pc, kind)
            .map(|s| s.slide_id.clone())
            .ok_or_else(|| Error::NotFound(format!("no slide carries a {} heatmap", kind.as_str())))?,
    };
    let grid = criterion_grid(&pc, &review, &slide_id, kind)?;
    let (img, meta) = render_heatmap(&grid, kind);
    match q.format.as_deref() {
        Some("json") => Ok(Json(meta).into_response()),
        None | Some("png") => Ok(([(header::CONTENT_TYPE, "image/png")], encode_png_gray(&img)?).into_response()),
        Some(other) => Err(Error::Unsupported(format!("heatmap format `{other}`")).into()),
    }
}

#[derive(Deserialize)]
struct CreateSession {
    case_id: String,
}

async fn create_session(State(st): State<Shared>, Json(req): Json<CreateSession>) -> ApiResult<Response> {
    let pc = st.processed(&req.case_id)?;
    let s = blocking(move || st.sessions.create(pc)).await?;
    Ok((StatusCode::CREATED, Json(s)).into_response())
}

#[derive(Deserialize)]
struct ActionRequest {
    #[serde(flatten)]
    body: ActionBody,
    #[serde(default)]
    actor: Option<String>,
}

async fn submit_action(
    State(st): State<Shared>,
    UrlPath(sid): UrlPath<String>,
    Json(req): Json<ActionRequest>,
) -> ApiResult<Response> {
    let s = blocking(move || {
        st.session(&sid)?;
        st.sessions.submit(&sid, req.body, req.actor.as_deref().unwrap_or("reviewer"))
    })
    .await?;
    Ok(Json(s).into_response())
}

async fn get_session(State(st): State<Shared>, UrlPath(sid): UrlPath<String>) -> ApiResult<Response> {
    let s = blocking(move || st.session(&sid)).await?;
    Ok(Json(s).into_response())
}

fn slide<'a>(st: &'a AppState, id: &str) -> ApiResult<&'a PyramidSlide> {
    st.slides.get(id).ok_or_else(|| ApiError(Error::NotFound(format!("slide {id}"))))
}

async fn tile(State(st): State<Shared>, UrlPath((id, level, tx, ty)): UrlPath<(String, i64, i64, i64)>) -> ApiResult<Response> {
    let bytes = slide(&st, &id)?.tile_bytes(level, tx, ty)?;
    Ok((
        [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "public, max-age=31536000, immutable")],
        bytes,
    )
        .into_response())
}

#[derive(Deserialize)]
struct RegionQuery {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    #[serde(default)]
    level: u32,
}

async fn region(State(st): State<Shared>, UrlPath(id): UrlPath<String>, Query(q): Query<RegionQuery>) -> ApiResult<Response> {
    let s = slide(&st, &id)?;
    let (lw, lh) = (q.w >> q.level, q.h >> q.level);
    if lw > MAX_REGION_PX || lh > MAX_REGION_PX {
        return Err(Error::Range(format!("region {lw}x{lh} exceeds {MAX_REGION_PX} px per side")).into());
    }
    let img = s.read_region(&Rect::new(q.x, q.y, q.w, q.h), q.level)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], encode_png_rgb(&img)?).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}/grading", get(grading))
        .route("/cases/{id}/criteria/{kind}/evidence", get(evidence))
        .route("/cases/{id}/criteria/{kind}/heatmap", get(heatmap))
        .route("/cases/{id}/regions", get(regions))
        .route("/sessions", post(create_session))
        .route("/sessions/{sid}/actions", post(submit_action))
        .route("/sessions/{sid}", get(get_session))
        .route("/slides/{id}/tiles/{level}/{tx}/{ty}", get(tile))
        .route("/slides/{id}/region", get(region))
        .with_state(Arc::new(state))
}

pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
