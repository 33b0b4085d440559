//! Screening worklist service.
//!
//! Cases are scored on submission, queued highest-risk first, reviewed by a
//! radiologist, and the verdicts feed live sensitivity/specificity at any
//! threshold. All state lives in an append-only event log under the data
//! directory.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/cases` | raw image body; 201 with the new case |
//! | GET | `/cases` | `status`, `sort`, `page`, `page_size`, `threshold` |
//! | GET | `/cases/{id}` | case with verdict history |
//! | GET | `/cases/{id}/image` | stored upload |
//! | GET | `/cases/{id}/heatmap.png` | overlay; 404 until rendered |
//! | POST | `/cases/{id}/verdict` | `{"decision": .., "reviewer": ..}` |
//! | GET | `/metrics?threshold=` | operating point over reviewed cases |
//! | GET | `/roc` | ROC over reviewed cases; 409 without both classes |
//! | GET | `/export/scores.csv` | `id,label,tb_score` of decisive verdicts |

mod api;
pub mod config;
pub mod scorer;
pub mod store;

use std::path::PathBuf;
use std::sync::Arc;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use thiserror::Error;

pub use api::{router, AppState};
pub use config::{HeatmapMode, ServiceConfig};
pub use scorer::{CaseScorer, ModelScorer};
pub use store::{CaseRecord, CaseStatus, Decision, Event, Store, Verdict};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("event log {path} line {line}: {msg}")]
    CorruptLog { path: PathBuf, line: usize, msg: String },
    #[error("unknown case {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("service not ready: no model loaded")]
    NotReady,
    #[error("model: {0}")]
    Model(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Unsupported(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ServiceError::Config(_) => "config",
            ServiceError::Io(_) => "io",
            ServiceError::CorruptLog { .. } => "corrupt_log",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Unsupported(_) => "unsupported_media_type",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Unprocessable(_) => "unprocessable",
            ServiceError::NotReady => "not_ready",
            ServiceError::Model(_) => "model",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.code(), "message": self.to_string() });
        (self.status(), axum::Json(body)).into_response()
    }
}

/// Load the configured model (if any), open the store, and serve until
/// interrupted. The bound address is printed to stdout as
/// `listening on http://<addr>`.
pub async fn run(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let scorer: Option<Arc<dyn CaseScorer>> = match &cfg.checkpoint {
        Some(p) => {
            let cam = tbscreen_core::cam::CamOptions {
                alpha: cfg.overlay_alpha,
                ..Default::default()
            };
            let s = ModelScorer::from_checkpoint(p, cam)?;
            tracing::info!(model = %s.describe(), "model loaded");
            Some(Arc::new(s))
        }
        None => {
            tracing::warn!("no checkpoint configured; submissions will be refused");
            None
        }
    };
    let store = Store::open(&cfg.data_dir)?;
    let state = AppState::new(cfg.clone(), store, scorer);
    let app = router(state);
    let listener = tokio::net::TcpListener::bind(cfg.addr()?).await.map_err(|e| ServiceError::Io(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| ServiceError::Io(e.to_string()))?;
    println!("listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Io(e.to_string()))
}
