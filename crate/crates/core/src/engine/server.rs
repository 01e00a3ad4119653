//! Review API over HTTP. Verdicts go through the same optimistic
//! concurrency check as the library call and are persisted atomically to
//! `cases/` before the response is sent.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::store::RunDir;
use super::{load_committed, overlay_reviews, write_case, Stage};
use crate::error::{Error, Result};
use crate::labels::LabelSpace;
use crate::verifier::{record_verdict, CaseState, Correction, ReviewSession, ReviewStats, Verdict, VerificationCase};
use crate::worldsim::{generate_world, SimWorld};

enum ImageSource {
    Sim(Arc<SimWorld>),
    Dir(PathBuf),
}

/// Shared state of one review server: a single run's current cases.
pub struct ReviewService {
    run: RunDir,
    label_space: LabelSpace,
    session: Mutex<ReviewSession>,
    images: ImageSource,
    static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub url: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    #[serde(flatten)]
    pub case: VerificationCase,
    pub image_refs: Vec<ImageRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub verdict: Verdict,
    #[serde(default)]
    pub corrections: Vec<Correction>,
    pub expected_revision: u64,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CaseFilter {
    state: Option<String>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    current_revision: Option<u64>,
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError(
            status,
            ErrorBody {
                error: msg.into(),
                current_revision: None,
            },
        )
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::RevisionConflict { .. } | Error::InvalidTransition(_) => StatusCode::CONFLICT,
            Error::UnknownImage(_) | Error::UnknownCategory(_) | Error::InvalidBox(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let current_revision = match &e {
            Error::RevisionConflict { current, .. } => Some(*current),
            _ => None,
        };
        ApiError(
            status,
            ErrorBody {
                error: e.to_string(),
                current_revision,
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

impl ReviewService {
    /// Load the current cases of a run that has reached Verify. Images come
    /// from `image_dir` when given, otherwise they are rendered from the
    /// simulated world.
    pub fn open(store_root: &Path, run_id: &str, image_dir: Option<PathBuf>, static_dir: Option<PathBuf>) -> Result<Self> {
        let run = RunDir::new(store_root, run_id);
        if !run.exists() {
            return Err(Error::UnknownRun(run.root.display().to_string()));
        }
        let manifest = run.read_manifest()?;
        manifest.verify()?;
        if !manifest.completed().any(|r| r.stage == Stage::Verify) {
            return Err(Error::NotRunnable(format!("run `{run_id}` has not reached Verify")));
        }
        let (state, _) = load_committed(&run, &manifest)?;
        let cases = overlay_reviews(&run, &state.cases)?;
        let images = match image_dir {
            Some(dir) => ImageSource::Dir(dir),
            None => ImageSource::Sim(Arc::new(generate_world(&manifest.config.world)?)),
        };
        Ok(ReviewService {
            label_space: state.label_space,
            session: Mutex::new(ReviewSession::new(run_id, cases)?),
            run,
            images,
            static_dir,
        })
    }

    pub fn run_id(&self) -> String {
        self.lock().run_id.clone()
    }

    pub fn stats(&self) -> ReviewStats {
        self.lock().stats()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ReviewSession> {
        self.session.lock().expect("review session poisoned")
    }

    fn image_size(&self, id: &str) -> Option<(u32, u32)> {
        match &self.images {
            ImageSource::Sim(w) => w.image(id).ok().map(|im| (im.record.width, im.record.height)),
            ImageSource::Dir(_) => None,
        }
    }

    fn view(&self, case: &VerificationCase) -> CaseView {
        CaseView {
            image_refs: case
                .images
                .iter()
                .map(|id| {
                    let (width, height) = self.image_size(id).unwrap_or((0, 0));
                    ImageRef {
                        id: id.clone(),
                        url: format!("/api/images/{id}"),
                        width,
                        height,
                    }
                })
                .collect(),
            case: case.clone(),
        }
    }

    fn check_corrections(&self, corrections: &[Correction]) -> Result<()> {
        for c in corrections {
            if self.label_space.get(c.category).is_none() {
                return Err(Error::UnknownCategory(c.category.0.to_string()));
            }
            if let Some((w, h)) = self.image_size(&c.image_id) {
                if !c.bbox.is_within(w as f64, h as f64) {
                    return Err(Error::InvalidBox(format!("{:?} outside {w}x{h} image {}", c.bbox.as_array(), c.image_id)));
                }
            }
        }
        Ok(())
    }

    /// Apply a verdict and persist the case; the session changes only if
    /// the write succeeds.
    pub fn submit(&self, case_id: &str, req: VerdictRequest) -> Result<Option<VerificationCase>> {
        self.check_corrections(&req.corrections)?;
        let mut session = self.lock();
        let Some(case) = session.get_mut(case_id) else {
            return Ok(None);
        };
        let mut updated = case.clone();
        record_verdict(&mut updated, req.verdict, req.corrections, req.expected_revision, req.note)?;
        write_case(&self.run.cases_dir(), &updated)?;
        *case = updated.clone();
        Ok(Some(updated))
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route("/api/runs/{run}/cases", get(list_cases))
            .route("/api/runs/{run}/review-stats", get(review_stats))
            .route("/api/cases/{id}", get(get_case))
            .route("/api/cases/{id}/verdict", post(post_verdict))
            .route("/api/images/{id}", get(get_image))
            .fallback(get(static_file))
            .with_state(self)
    }
}

fn check_run(svc: &ReviewService, run: &str) -> ApiResult<()> {
    if svc.lock().run_id == run {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown run `{run}`")))
    }
}

async fn list_cases(
    State(svc): State<Arc<ReviewService>>,
    UrlPath(run): UrlPath<String>,
    Query(filter): Query<CaseFilter>,
) -> ApiResult<Json<Vec<VerificationCase>>> {
    check_run(&svc, &run)?;
    let state = match filter.state.as_deref() {
        None | Some("all") => None,
        Some("pending") => Some(CaseState::Pending),
        Some("passed") => Some(CaseState::Passed),
        Some("failed") => Some(CaseState::Failed),
        Some(other) => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown state `{other}`"))),
    };
    let session = svc.lock();
    Ok(Json(session.with_state(state).into_iter().cloned().collect()))
}

async fn review_stats(State(svc): State<Arc<ReviewService>>, UrlPath(run): UrlPath<String>) -> ApiResult<Json<ReviewStats>> {
    check_run(&svc, &run)?;
    Ok(Json(svc.stats()))
}

async fn get_case(State(svc): State<Arc<ReviewService>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<CaseView>> {
    let case = svc
        .lock()
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown case `{id}`")))?;
    Ok(Json(svc.view(&case)))
}

async fn post_verdict(
    State(svc): State<Arc<ReviewService>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<VerdictRequest>,
) -> ApiResult<Json<CaseView>> {
    match svc.submit(&id, req)? {
        Some(case) => Ok(Json(svc.view(&case))),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown case `{id}`"))),
    }
}

fn safe_relative(path: &str) -> Option<PathBuf> {
    let p = Path::new(path);
    p.components()
        .all(|c| matches!(c, Component::Normal(_)))
        .then(|| p.to_path_buf())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        _ => "application/octet-stream",
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
];

/// Flat gray canvas with each object's box outlined in its category color.
pub fn render_placeholder(world: &SimWorld, id: &str) -> Result<Vec<u8>> {
    let im = world.image(id)?;
    let (w, h) = (im.record.width, im.record.height);
    let mut img = RgbImage::from_pixel(w, h, Rgb([96, 96, 96]));
    for o in &im.objects {
        let color = Rgb(PALETTE[o.category % PALETTE.len()]);
        let [x0, y0, x1, y1] = o.bbox.as_array();
        let (x0, y0) = (x0.floor().max(0.0) as u32, y0.floor().max(0.0) as u32);
        let (x1, y1) = ((x1.ceil() as u32).min(w) , (y1.ceil() as u32).min(h));
        for t in 0..2u32 {
            for x in x0..x1 {
                for y in [y0 + t, y1.saturating_sub(1 + t)] {
                    if y < h {
                        img.put_pixel(x, y, color);
                    }
                }
            }
            for y in y0..y1 {
                for x in [x0 + t, x1.saturating_sub(1 + t)] {
                    if x < w {
                        img.put_pixel(x, y, color);
                    }
                }
            }
        }
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::InvalidData(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

async fn get_image(State(svc): State<Arc<ReviewService>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("unknown image `{id}`"));
    match &svc.images {
        ImageSource::Sim(world) => {
            let png = render_placeholder(world, &id).map_err(|_| not_found())?;
            Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
        }
        ImageSource::Dir(dir) => {
            let rel = safe_relative(&id).ok_or_else(not_found)?;
            for ext in ["png", "jpg", "jpeg"] {
                let path = dir.join(&rel).with_extension(ext);
                if let Ok(bytes) = tokio::fs::read(&path).await {
                    return Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response());
                }
            }
            Err(not_found())
        }
    }
}

async fn static_file(State(svc): State<Arc<ReviewService>>, uri: axum::http::Uri) -> ApiResult<Response> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no such path `{}`", uri.path()));
    let dir = svc.static_dir.as_ref().ok_or_else(not_found)?;
    let trimmed = uri.path().trim_start_matches('/');
    let rel = if trimmed.is_empty() { PathBuf::from("index.html") } else { safe_relative(trimmed).ok_or_else(not_found)? };
    let path = dir.join(rel);
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

pub async fn bind(addr: &str) -> Result<tokio::net::TcpListener> {
    let normalized = if addr.starts_with(':') { format!("0.0.0.0{addr}") } else { addr.to_string() };
    tokio::net::TcpListener::bind(&normalized).await.map_err(|e| Error::BindFailure {
        addr: addr.to_string(),
        reason: e.to_string(),
    })
}

/// Serve until the listener fails or the task is cancelled.
pub async fn serve(service: Arc<ReviewService>, listener: tokio::net::TcpListener) -> Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, "review service listening");
    axum::serve(listener, service.router())
        .await
        .map_err(|e| Error::BindFailure {
            addr: addr.map(|a| a.to_string()).unwrap_or_default(),
            reason: e.to_string(),
        })
}
