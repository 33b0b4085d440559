use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tbscreen_core::Label;
use tokio::sync::{mpsc, Mutex};

use crate::config::{HeatmapMode, ServiceConfig};
use crate::scorer::{decode_image, CaseScorer};
use crate::store::{CaseRecord, CaseStatus, Decision, Event, ListQuery, SortKey, Store, Verdict, MAX_PAGE_SIZE};
use crate::ServiceError;

type ApiResult<T> = Result<T, ServiceError>;

const MAX_UPLOAD_BYTES: usize = 64 << 20;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    cfg: ServiceConfig,
    store: Mutex<Store>,
    scorer: Option<Arc<dyn CaseScorer>>,
    queue: std::sync::Mutex<Option<mpsc::UnboundedSender<String>>>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig, store: Store, scorer: Option<Arc<dyn CaseScorer>>) -> Self {
        Self {
            inner: Arc::new(Inner {
                cfg,
                store: Mutex::new(store),
                scorer,
                queue: std::sync::Mutex::new(None),
            }),
        }
    }

    /// Start the heatmap worker and enqueue every case still missing a
    /// heatmap. Needs a running tokio runtime.
    fn start_queue(&self) {
        let (tx, rx) = mpsc::unbounded_channel();
        *self.inner.queue.lock().expect("queue lock") = Some(tx.clone());
        tokio::spawn(heatmap_worker(self.clone(), rx));
        let state = self.clone();
        tokio::spawn(async move {
            let store = state.inner.store.lock().await;
            for c in store.cases().filter(|c| c.heatmap_ref.is_none()) {
                let _ = tx.send(c.case_id.clone());
            }
        });
    }

    fn enqueue(&self, case_id: String) {
        if let Some(tx) = self.inner.queue.lock().expect("queue lock").as_ref() {
            let _ = tx.send(case_id);
        }
    }
}

pub fn router(state: AppState) -> Router {
    if state.inner.cfg.heatmap_mode == HeatmapMode::Queued && state.inner.scorer.is_some() {
        state.start_queue();
    }
    let app = Router::new()
        .route("/health", get(health))
        .route("/cases", post(submit_case).get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/image", get(get_image))
        .route("/cases/{id}/heatmap.png", get(get_heatmap))
        .route("/cases/{id}/verdict", post(record_verdict))
        .route("/metrics", get(live_metrics))
        .route("/roc", get(roc))
        .route("/export/scores.csv", get(export_scores))
        .fallback(get(static_asset))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    app
}

/// Files of the review UI bundle; `/` maps to `index.html`.
async fn static_asset(State(st): State<AppState>, uri: axum::http::Uri) -> ApiResult<Response> {
    let not_found = || ServiceError::NotFound(uri.path().to_string());
    let root = st.inner.cfg.static_dir.as_ref().ok_or_else(not_found)?;
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let safe = Path::new(rel).components().all(|c| matches!(c, std::path::Component::Normal(_)));
    if !safe {
        return Err(not_found());
    }
    let path = root.join(rel);
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type_for(rel))], bytes).into_response())
}

fn parse_threshold(raw: Option<&String>, default: f64) -> ApiResult<f64> {
    match raw {
        None => Ok(default),
        Some(s) => match s.parse::<f64>() {
            Ok(t) if (0.0..=1.0).contains(&t) => Ok(t),
            _ => Err(ServiceError::BadRequest(format!("threshold must be a number in [0, 1], got {s:?}"))),
        },
    }
}

fn reject_unknown(params: &HashMap<String, String>, allowed: &[&str]) -> ApiResult<()> {
    match params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ServiceError::BadRequest(format!("unknown query parameter {k:?}; allowed: {}", allowed.join(", ")))),
        None => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct CaseView<'a> {
    case_id: &'a str,
    image_ref: &'a str,
    tb_score: f64,
    predicted: Label,
    threshold: f64,
    heatmap_ref: Option<&'a str>,
    status: CaseStatus,
    created_at: chrono::DateTime<Utc>,
    verdict: Option<&'a Verdict>,
    history: &'a [Verdict],
}

impl<'a> CaseView<'a> {
    fn new(c: &'a CaseRecord, threshold: f64) -> Self {
        Self {
            case_id: &c.case_id,
            image_ref: &c.image_ref,
            tb_score: c.tb_score,
            predicted: if c.tb_score >= threshold { Label::Tb } else { Label::Healthy },
            threshold,
            heatmap_ref: c.heatmap_ref.as_deref(),
            status: c.status(),
            created_at: c.created_at,
            verdict: c.active_verdict(),
            history: &c.verdicts,
        }
    }
}

async fn health(State(st): State<AppState>) -> Json<serde_json::Value> {
    let n = st.inner.store.lock().await.len();
    Json(serde_json::json!({
        "status": "ok",
        "model": st.inner.scorer.as_ref().map(|s| s.describe()),
        "cases": n,
    }))
}

fn write_synced(path: &Path, bytes: &[u8]) -> ApiResult<()> {
    use std::io::Write;
    let err = |e: std::io::Error| ServiceError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(err)?;
    }
    let mut f = std::fs::File::create(path).map_err(err)?;
    f.write_all(bytes).map_err(err)?;
    f.sync_all().map_err(err)
}

async fn submit_case(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let scorer = st.inner.scorer.clone().ok_or(ServiceError::NotReady)?;
    if let Some(ct) = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()) {
        let ct = ct.to_ascii_lowercase();
        if ct.starts_with("text/") || ct.starts_with("application/json") || ct.starts_with("multipart/") {
            return Err(ServiceError::Unsupported(format!("expected a raw image body, got {ct}")));
        }
    }
    if body.is_empty() {
        return Err(ServiceError::Unsupported("empty body".into()));
    }
    let sync = st.inner.cfg.heatmap_mode == HeatmapMode::Sync;
    let bytes = body.clone();
    let (score, heatmap, ext) = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let (img, ext) = decode_image(&bytes, scorer.input_dims())?;
        let score = scorer.score(&img)?;
        let heatmap = if sync { Some(scorer.heatmap_png(&img)?) } else { None };
        Ok((score, heatmap, ext))
    })
    .await
    .map_err(|e| ServiceError::Model(e.to_string()))??;
    if !(0.0..=1.0).contains(&score) {
        return Err(ServiceError::Model(format!("scorer returned {score}")));
    }

    let mut store = st.inner.store.lock().await;
    let case_id = store.next_case_id();
    let image_ref = format!("images/{case_id}.{ext}");
    write_synced(&store.dir().join(&image_ref), &body)?;
    let now = Utc::now();
    store.append(Event::CaseCreated {
        case_id: case_id.clone(),
        image_ref,
        image_sha256: hex::encode(Sha256::digest(&body)),
        tb_score: score,
        created_at: now,
    })?;
    match heatmap {
        Some(png) => {
            let heatmap_ref = format!("heatmaps/{case_id}.png");
            write_synced(&store.dir().join(&heatmap_ref), &png)?;
            store.append(Event::HeatmapReady {
                case_id: case_id.clone(),
                heatmap_ref,
                at: now,
            })?;
        }
        None => st.enqueue(case_id.clone()),
    }
    let case = store.get(&case_id).expect("just created");
    let view = CaseView::new(case, st.inner.cfg.default_threshold);
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn heatmap_worker(st: AppState, mut rx: mpsc::UnboundedReceiver<String>) {
    let Some(scorer) = st.inner.scorer.clone() else { return };
    while let Some(case_id) = rx.recv().await {
        let image_path = {
            let store = st.inner.store.lock().await;
            match store.get(&case_id) {
                Some(c) if c.heatmap_ref.is_none() => store.dir().join(&c.image_ref),
                _ => continue,
            }
        };
        let scorer = scorer.clone();
        let rendered = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> {
            let bytes = std::fs::read(&image_path).map_err(|e| ServiceError::Io(e.to_string()))?;
            let (img, _) = decode_image(&bytes, scorer.input_dims())?;
            scorer.heatmap_png(&img)
        })
        .await;
        let png = match rendered {
            Ok(Ok(png)) => png,
            Ok(Err(e)) => {
                tracing::error!(%case_id, error = %e, "heatmap failed");
                continue;
            }
            Err(e) => {
                tracing::error!(%case_id, error = %e, "heatmap task panicked");
                continue;
            }
        };
        let mut store = st.inner.store.lock().await;
        let heatmap_ref = format!("heatmaps/{case_id}.png");
        let res = write_synced(&store.dir().join(&heatmap_ref), &png).and_then(|_| {
            store.append(Event::HeatmapReady {
                case_id: case_id.clone(),
                heatmap_ref,
                at: Utc::now(),
            })
        });
        if let Err(e) = res {
            tracing::error!(%case_id, error = %e, "recording heatmap failed");
        }
    }
}

#[derive(Debug, Serialize)]
struct PageView<'a> {
    items: Vec<CaseView<'a>>,
    total: usize,
    page: usize,
    page_size: usize,
    pages: usize,
}

async fn list_cases(State(st): State<AppState>, Query(params): Query<HashMap<String, String>>) -> ApiResult<Response> {
    reject_unknown(&params, &["status", "sort", "page", "page_size", "threshold"])?;
    let bad = ServiceError::BadRequest;
    let mut q = ListQuery::default();
    if let Some(s) = params.get("status") {
        q.status = Some(s.parse::<CaseStatus>().map_err(bad)?);
    }
    if let Some(s) = params.get("sort") {
        q.sort = s.parse::<SortKey>().map_err(bad)?;
    }
    if let Some(s) = params.get("page") {
        q.page = s.parse().ok().filter(|&p| p >= 1).ok_or_else(|| bad(format!("page must be a positive integer, got {s:?}")))?;
    }
    if let Some(s) = params.get("page_size") {
        q.page_size = s
            .parse()
            .ok()
            .filter(|&p| (1..=MAX_PAGE_SIZE).contains(&p))
            .ok_or_else(|| bad(format!("page_size must be in 1..={MAX_PAGE_SIZE}, got {s:?}")))?;
    }
    let threshold = parse_threshold(params.get("threshold"), st.inner.cfg.default_threshold)?;
    let store = st.inner.store.lock().await;
    let page = store.list(&q);
    let view = PageView {
        items: page.items.iter().map(|c| CaseView::new(c, threshold)).collect(),
        total: page.total,
        page: page.page,
        page_size: page.page_size,
        pages: page.pages,
    };
    Ok(Json(view).into_response())
}

async fn get_case(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    reject_unknown(&params, &["threshold"])?;
    let threshold = parse_threshold(params.get("threshold"), st.inner.cfg.default_threshold)?;
    let store = st.inner.store.lock().await;
    let case = store.get(&id).ok_or(ServiceError::NotFound(id.clone()))?;
    Ok(Json(CaseView::new(case, threshold)).into_response())
}

fn content_type_for(path: &str) -> &'static str {
    match path.rsplit('.').next().unwrap_or("") {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "bmp" => "image/bmp",
        "tif" | "tiff" => "image/tiff",
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn stored_file(st: &AppState, id: &str, pick: impl Fn(&CaseRecord) -> Option<String>) -> ApiResult<Response> {
    let path = {
        let store = st.inner.store.lock().await;
        let case = store.get(id).ok_or(ServiceError::NotFound(id.to_string()))?;
        let rel = pick(case).ok_or_else(|| ServiceError::NotFound(format!("{id}: heatmap not rendered yet")))?;
        store.dir().join(rel)
    };
    let bytes = tokio::fs::read(&path).await.map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))?;
    let ct = content_type_for(&path.to_string_lossy());
    Ok(([(header::CONTENT_TYPE, ct)], bytes).into_response())
}

async fn get_image(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    stored_file(&st, &id, |c| Some(c.image_ref.clone())).await
}

async fn get_heatmap(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    stored_file(&st, &id, |c| c.heatmap_ref.clone()).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictRequest {
    decision: Decision,
    reviewer: Option<String>,
}

async fn record_verdict(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Result<Json<VerdictRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body.map_err(|e| ServiceError::Unprocessable(format!("bad verdict: {}", e.body_text())))?;
    let reviewer = req
        .reviewer
        .or_else(|| headers.get("x-reviewer").and_then(|v| v.to_str().ok()).map(str::to_string))
        .filter(|r| !r.trim().is_empty())
        .unwrap_or_else(|| "anonymous".into());
    let mut store = st.inner.store.lock().await;
    store.append(Event::VerdictRecorded(Verdict {
        case_id: id.clone(),
        decision: req.decision,
        reviewer,
        recorded_at: Utc::now(),
    }))?;
    let case = store.get(&id).expect("verdict target exists");
    Ok(Json(CaseView::new(case, st.inner.cfg.default_threshold)).into_response())
}

async fn live_metrics(State(st): State<AppState>, Query(params): Query<HashMap<String, String>>) -> ApiResult<Response> {
    reject_unknown(&params, &["threshold"])?;
    let threshold = parse_threshold(params.get("threshold"), st.inner.cfg.default_threshold)?;
    let m = st.inner.store.lock().await.live_metrics(threshold);
    Ok(Json(m).into_response())
}

async fn roc(State(st): State<AppState>) -> ApiResult<Response> {
    let curve = st.inner.store.lock().await.roc().map_err(|e| ServiceError::Conflict(format!("no ROC over reviewed cases: {e}")))?;
    Ok(Json(curve).into_response())
}

async fn export_scores(State(st): State<AppState>) -> ApiResult<Response> {
    let rows = st.inner.store.lock().await.labeled_scores();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["id", "label", "tb_score"]).map_err(|e| ServiceError::Io(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| ServiceError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ServiceError::Io(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], bytes).into_response())
}
