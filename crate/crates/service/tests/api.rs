use std::io::Cursor;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use image::{GrayImage, ImageFormat, Luma};
use serde_json::Value;
use tbscreen_core::dataset::ImageDims;
use tbscreen_core::ImageTensor;
use tbscreen_service::{router, AppState, CaseScorer, HeatmapMode, ServiceConfig, ServiceError, Store};
use tower::ServiceExt;

/// Scores an image by its mean intensity.
struct MeanScorer;

impl CaseScorer for MeanScorer {
    fn input_dims(&self) -> ImageDims {
        ImageDims::square(16)
    }

    fn score(&self, image: &ImageTensor) -> Result<f64, ServiceError> {
        Ok(image.data().iter().map(|&v| v as f64).sum::<f64>() / image.data().len() as f64)
    }

    fn heatmap_png(&self, _image: &ImageTensor) -> Result<Vec<u8>, ServiceError> {
        Ok(png(1))
    }

    fn describe(&self) -> String {
        "mean".into()
    }
}

fn png(level: u8) -> Vec<u8> {
    let img = GrayImage::from_pixel(8, 8, Luma([level]));
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).unwrap();
    buf.into_inner()
}

fn app(dir: &std::path::Path, scorer: bool, mode: HeatmapMode) -> Router {
    let cfg = ServiceConfig {
        data_dir: dir.to_path_buf(),
        heatmap_mode: mode,
        ..ServiceConfig::default()
    };
    let store = Store::open(dir).unwrap();
    let scorer: Option<Arc<dyn CaseScorer>> = if scorer { Some(Arc::new(MeanScorer)) } else { None };
    router(AppState::new(cfg, store, scorer))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn json(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (s, b) = call(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn submit(bytes: Vec<u8>, ct: &str) -> Request<Body> {
    Request::post("/cases").header(header::CONTENT_TYPE, ct).body(Body::from(bytes)).unwrap()
}

fn verdict(id: &str, decision: &str) -> Request<Body> {
    Request::post(format!("/cases/{id}/verdict"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(format!(r#"{{"decision":"{decision}","reviewer":"dr a"}}"#)))
        .unwrap()
}

#[tokio::test]
async fn submit_score_and_duplicate_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), true, HeatmapMode::Sync);
    let (s, a) = json(&app, submit(png(200), "image/png")).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, b) = json(&app, submit(png(200), "image/png")).await;
    assert_ne!(a["case_id"], b["case_id"]);
    assert_eq!(a["tb_score"], b["tb_score"]);
    assert_eq!(a["predicted"], "tb");
    assert_eq!(a["status"], "pending");
    let (s, body) = call(&app, get(&format!("/cases/{}/heatmap.png", a["case_id"].as_str().unwrap()))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&body[1..4], b"PNG");
}

#[tokio::test]
async fn rejects_text_and_reports_not_ready() {
    let dir = tempfile::tempdir().unwrap();
    let ready = app(dir.path(), true, HeatmapMode::Sync);
    let (s, e) = json(&ready, submit(b"hello".to_vec(), "text/plain")).await;
    assert_eq!(s, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    assert_eq!(e["error"], "unsupported_media_type");
    let (s, _) = json(&ready, submit(b"hello".to_vec(), "application/octet-stream")).await;
    assert_eq!(s, StatusCode::UNSUPPORTED_MEDIA_TYPE);

    let dir = tempfile::tempdir().unwrap();
    let idle = app(dir.path(), false, HeatmapMode::Sync);
    let (s, e) = json(&idle, submit(png(1), "image/png")).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(e["message"].as_str().unwrap().contains("not ready"));
}

#[tokio::test]
async fn worklist_filter_sort_and_paging() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), true, HeatmapMode::Sync);
    let (_, empty) = json(&app, get("/cases")).await;
    assert_eq!(empty["total"], 0);
    assert_eq!(empty["items"].as_array().unwrap().len(), 0);

    let mut ids = Vec::new();
    for level in [40u8, 220, 120, 250, 10] {
        let (_, c) = json(&app, submit(png(level), "image/png")).await;
        ids.push(c["case_id"].as_str().unwrap().to_string());
    }
    json(&app, verdict(&ids[3], "confirm_tb")).await;
    json(&app, verdict(&ids[4], "confirm_healthy")).await;

    let (_, p) = json(&app, get("/cases?status=pending")).await;
    let got: Vec<&str> = p["items"].as_array().unwrap().iter().map(|c| c["case_id"].as_str().unwrap()).collect();
    assert_eq!(got, [ids[1].as_str(), ids[2].as_str(), ids[0].as_str()]);

    let mut walked = Vec::new();
    for page in 1..=3 {
        let (_, p) = json(&app, get(&format!("/cases?page_size=2&page={page}"))).await;
        assert_eq!((p["total"].as_u64(), p["pages"].as_u64()), (Some(5), Some(3)));
        walked.extend(p["items"].as_array().unwrap().iter().map(|c| c["case_id"].as_str().unwrap().to_string()));
    }
    assert_eq!(walked, [&ids[1], &ids[2], &ids[0], &ids[3], &ids[4]].map(String::clone));

    for bad in ["/cases?status=done", "/cases?sort=random", "/cases?page=0", "/cases?color=red", "/metrics?threshold=2"] {
        assert_eq!(call(&app, get(bad)).await.0, StatusCode::BAD_REQUEST, "{bad}");
    }
}

#[tokio::test]
async fn verdicts_supersede_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), true, HeatmapMode::Sync);
    let (_, c) = json(&app, submit(png(90), "image/png")).await;
    let id = c["case_id"].as_str().unwrap();
    let (s, v) = json(&app, verdict(id, "confirm_tb")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "reviewed");
    let (_, v) = json(&app, verdict(id, "confirm_healthy")).await;
    assert_eq!(v["history"].as_array().unwrap().len(), 2);
    assert_eq!(v["verdict"]["decision"], "confirm_healthy");
    assert_eq!(json(&app, verdict("case-999999", "confirm_tb")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(json(&app, verdict(id, "maybe")).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, get("/cases/nope")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn metrics_roc_and_export_agree_with_evaluator() {
    use tbscreen_core::eval;
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), true, HeatmapMode::Sync);
    let (_, m) = json(&app, get("/metrics")).await;
    assert!(m["sensitivity"].is_null() && m["specificity"].is_null() && m["accuracy"].is_null());
    assert_eq!(json(&app, get("/roc")).await.0, StatusCode::CONFLICT);

    for (level, d) in [(230u8, "confirm_tb"), (100, "confirm_tb"), (150, "confirm_healthy"), (20, "confirm_healthy"), (60, "uncertain")] {
        let (_, c) = json(&app, submit(png(level), "image/png")).await;
        json(&app, verdict(c["case_id"].as_str().unwrap(), d)).await;
    }
    let (_, csv_bytes) = call(&app, get("/export/scores.csv")).await;
    let path = dir.path().join("export.csv");
    std::fs::write(&path, &csv_bytes).unwrap();
    let rows = eval::read_scores_csv(&path).unwrap();
    assert_eq!(rows.len(), 4);
    let (s, l): (Vec<f64>, Vec<_>) = rows.iter().map(|r| (r.tb_score, r.label)).unzip();
    for t in [0.0, 0.3, 0.5, 0.9] {
        let (_, live) = json(&app, get(&format!("/metrics?threshold={t}"))).await;
        let offline = serde_json::to_value(eval::metrics(eval::confusion_matrix(&s, &l, t).unwrap(), t)).unwrap();
        for k in ["threshold", "confusion", "sensitivity", "specificity", "accuracy"] {
            assert_eq!(live[k], offline[k], "{k} at {t}");
        }
        assert_eq!(live["n_uncertain"], 1);
    }
    let (status, roc) = json(&app, get("/roc")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(roc, serde_json::to_value(eval::roc_curve(&s, &l).unwrap()).unwrap());
}

#[tokio::test]
async fn queued_heatmaps_arrive_later() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), true, HeatmapMode::Queued);
    let (_, c) = json(&app, submit(png(77), "image/png")).await;
    let id = c["case_id"].as_str().unwrap().to_string();
    let mut ready = false;
    for _ in 0..100 {
        let (_, c) = json(&app, get(&format!("/cases/{id}"))).await;
        if !c["heatmap_ref"].is_null() {
            ready = true;
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    assert!(ready);
    assert_eq!(call(&app, get(&format!("/cases/{id}/heatmap.png"))).await.0, StatusCode::OK);
}

#[tokio::test]
async fn state_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let app = app(dir.path(), true, HeatmapMode::Sync);
        let (_, c) = json(&app, submit(png(180), "image/png")).await;
        let id = c["case_id"].as_str().unwrap().to_string();
        json(&app, verdict(&id, "confirm_tb")).await;
        id
    };
    let app = app(dir.path(), true, HeatmapMode::Sync);
    let (_, c) = json(&app, get(&format!("/cases/{id}"))).await;
    assert_eq!(c["status"], "reviewed");
    let (s, img) = call(&app, get(&format!("/cases/{id}/image"))).await;
    assert_eq!((s, img), (StatusCode::OK, png(180)));
}

#[tokio::test]
async fn serves_static_ui_inside_its_root_only() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(ui.join("assets")).unwrap();
    std::fs::write(ui.join("index.html"), "<html>worklist</html>").unwrap();
    std::fs::write(ui.join("assets").join("app.js"), "let x;").unwrap();
    std::fs::write(dir.path().join("secret.txt"), "no").unwrap();
    let cfg = ServiceConfig {
        data_dir: dir.path().join("data"),
        static_dir: Some(ui),
        ..ServiceConfig::default()
    };
    let app = router(AppState::new(cfg, Store::open(&dir.path().join("data")).unwrap(), None));
    let (s, body) = call(&app, get("/")).await;
    assert_eq!((s, body), (StatusCode::OK, b"<html>worklist</html>".to_vec()));
    let resp = app.clone().oneshot(get("/assets/app.js")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()[header::CONTENT_TYPE].to_str().unwrap().contains("javascript"));
    for bad in ["/../secret.txt", "/assets/../../secret.txt", "/%2e%2e/secret.txt", "/missing.css"] {
        assert_eq!(call(&app, get(bad)).await.0, StatusCode::NOT_FOUND, "{bad}");
    }
}
