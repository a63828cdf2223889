mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::Fixture;
use cxrmetric_core::embedder::ModelCheckpoint;
use cxrmetric_core::transfer::{EHR_DIM, TransferModel};
use cxrmetric_service::config::ServiceConfig;
use cxrmetric_service::engine::{Engine, QueryResponse};
use cxrmetric_service::http::router;
use cxrmetric_service::ServiceError;

const BOUNDARY: &str = "cxrmetric-test-boundary";

fn app(fx: &Fixture) -> Router {
    router(Arc::new(Engine::open(&fx.config).unwrap()))
}

fn multipart(image: Option<&[u8]>, k: Option<&str>) -> Request<Body> {
    let mut body = Vec::new();
    if let Some(bytes) = image {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"q.png\"\r\nContent-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    if let Some(k) = k {
        body.extend_from_slice(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"k\"\r\n\r\n{k}\r\n").as_bytes());
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/api/query")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, bytes)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Option<String>, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

fn predict_request(body: Value) -> Request<Body> {
    Request::post("/api/predict-intervention")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn error_of(bytes: &[u8]) -> String {
    let v: Value = serde_json::from_slice(bytes).unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_reports_index_and_bounds() {
    let fx = Fixture::new();
    let app = app(&fx);
    let (status, _, body) = get(&app, "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["index_size"], fx.train_ids().len());
    assert_eq!(v["model_hash"], fx.checkpoint.content_hash());
    assert_eq!(v["default_k"], 10);
    assert_eq!(v["k_min"], 1);
    assert_eq!(v["k_max"], 30);
    assert_eq!(v["transfer_model"], true);
}

#[tokio::test]
async fn gallery_image_retrieves_itself_first() {
    let fx = Fixture::new();
    let app = app(&fx);
    let id = &fx.train_ids()[3];
    let png = std::fs::read(fx.image_path(id)).unwrap();
    let (status, ctype, body) = send(&app, multipart(Some(&png), Some("1"))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(ctype.as_deref(), Some("application/json"));
    let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 1);
    let hit = &resp.results[0];
    assert_eq!(&hit.id, id);
    // The store keeps vectors to its 1e-6 round-trip tolerance.
    assert!((hit.similarity - 1.0).abs() < 1e-6, "similarity {}", hit.similarity);
    assert_eq!(hit.label, fx.manifest.get(id).unwrap().label);
    assert_eq!(resp.predicted_label, hit.label);
    assert_eq!(hit.clinical, fx.manifest.get(id).unwrap().clinical);
    assert_eq!(hit.thumbnail_url, format!("/api/images/{id}"));

    let (status, ctype, body) = get(&app, &resp.query_overlay_url).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert!(body.starts_with(b"\x89PNG"));
}

#[tokio::test]
async fn query_is_repeatable_and_ordered() {
    let fx = Fixture::new();
    let app = app(&fx);
    let png = std::fs::read(fx.image_path(&fx.train_ids()[0])).unwrap();
    let run = || async {
        let (status, _, body) = send(&app, multipart(Some(&png), Some("7"))).await;
        assert_eq!(status, StatusCode::OK);
        serde_json::from_slice::<QueryResponse>(&body).unwrap()
    };
    let (a, b) = (run().await, run().await);
    assert_eq!(a.results, b.results);
    assert_eq!(a.class_scores, b.class_scores);
    assert_eq!(a.results.len(), 7);
    assert!(a.results.windows(2).all(|w| w[0].similarity >= w[1].similarity));
}

#[tokio::test]
async fn default_k_applies_without_field() {
    let fx = Fixture::new();
    let app = app(&fx);
    let png = std::fs::read(fx.image_path(&fx.train_ids()[0])).unwrap();
    let (status, _, body) = send(&app, multipart(Some(&png), None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<QueryResponse>(&body).unwrap().results.len(), 10);
}

#[tokio::test]
async fn bad_queries_are_client_errors() {
    let fx = Fixture::new();
    let app = app(&fx);
    let png = std::fs::read(fx.image_path(&fx.train_ids()[0])).unwrap();
    for k in ["0", "31", "two"] {
        let (status, _, body) = send(&app, multipart(Some(&png), Some(k))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "k = {k}");
        assert!(!error_of(&body).is_empty());
    }
    let (status, _, _) = send(&app, multipart(None, Some("3"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = send(&app, multipart(Some(b"not an image"), Some("3"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn images_and_overlays() {
    let fx = Fixture::new();
    let app = app(&fx);
    let id = &fx.train_ids()[1];
    for uri in [format!("/api/images/{id}"), format!("/api/overlays/{id}")] {
        let (status, ctype, body) = get(&app, &uri).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
        assert_eq!(ctype.as_deref(), Some("image/png"));
        let img = image::load_from_memory(&body).unwrap();
        assert_eq!((img.width(), img.height()), (common::SIDE as u32, common::SIDE as u32));
    }
    for uri in ["/api/images/nope", "/api/overlays/nope", "/api/overlays/query-0000000000000000"] {
        let (status, _, body) = get(&app, uri).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert!(error_of(&body).contains("nope") || uri.contains("query-"));
    }
}

#[tokio::test]
async fn predict_by_id_and_by_upload() {
    let fx = Fixture::new();
    let app = app(&fx);
    let id = fx.train_ids()[2].clone();
    let mut ehr: Vec<Option<f64>> = (0..EHR_DIM).map(|i| Some(i as f64)).collect();
    ehr[4] = None;
    let (status, _, body) = send(&app, predict_request(json!({"image": id, "ehr": ehr}))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let p = serde_json::from_slice::<Value>(&body).unwrap()["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let png = std::fs::read(fx.image_path(&id)).unwrap();
    let encoded = base64::engine::general_purpose::STANDARD.encode(png);
    let (status, _, body) = send(&app, predict_request(json!({"image": encoded, "ehr": ehr}))).await;
    assert_eq!(status, StatusCode::OK);
    let q = serde_json::from_slice::<Value>(&body).unwrap()["probability"].as_f64().unwrap();
    assert!((p - q).abs() < 1e-12, "{p} vs {q}");
}

#[tokio::test]
async fn predict_rejects_bad_input() {
    let fx = Fixture::new();
    let app = app(&fx);
    let id = fx.train_ids()[0].clone();
    let cases = [
        json!({"image": id, "ehr": [1.0, 2.0]}),
        json!({"image": "%%%", "ehr": vec![0.0; EHR_DIM]}),
        json!({"ehr": vec![0.0; EHR_DIM]}),
    ];
    for body in cases {
        let (status, _, _) = send(&app, predict_request(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    }
    let raw = Request::post("/api/predict-intervention")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(send(&app, raw).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn predict_without_transfer_model_is_not_found() {
    let fx = Fixture::new();
    let cfg = ServiceConfig {
        transfer_model: None,
        ..fx.config.clone()
    };
    let app = router(Arc::new(Engine::open(&cfg).unwrap()));
    let body = json!({"image": fx.train_ids()[0], "ehr": vec![0.0; EHR_DIM]});
    assert_eq!(send(&app, predict_request(body)).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn transfer_model_from_another_checkpoint_conflicts() {
    let fx = Fixture::new();
    let path = fx.config.transfer_model.clone().unwrap();
    let mut model = TransferModel::load(&path).unwrap();
    model.model_hash = "0123".into();
    model.save(&path).unwrap();
    let app = app(&fx);
    let body = json!({"image": fx.train_ids()[0], "ehr": vec![0.0; EHR_DIM]});
    let (status, _, err) = send(&app, predict_request(body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(error_of(&err).contains("0123"));
}

#[test]
fn index_from_another_checkpoint_is_refused() {
    let fx = Fixture::new();
    let other = ModelCheckpoint::init(cxrmetric_core::embedder::EmbedderConfig {
        seed: 77,
        ..common::small_model()
    })
    .unwrap();
    let dir = fx.dir.path().join("other-ckpt");
    other.save(&dir).unwrap();
    let strict = ServiceConfig {
        checkpoint: dir.clone(),
        ..fx.config.clone()
    };
    let err = Engine::open(&strict).err().expect("strict mode must refuse");
    assert!(matches!(err, ServiceError::HashMismatch { .. }), "{err}");
    assert_eq!(err.status(), 409);
    let lenient = ServiceConfig {
        strict_hash: false,
        transfer_model: None,
        ..strict
    };
    assert!(Engine::open(&lenient).is_ok());
}

#[test]
fn engine_query_matches_http_shape() {
    let fx = Fixture::new();
    let engine = Engine::open(&fx.config).unwrap();
    let id = &fx.train_ids()[5];
    let img = engine.load_image(&fx.image_path(id)).unwrap();
    let resp = engine.query(&img, 4).unwrap();
    assert_eq!(&resp.results[0].id, id);
    let total: f64 = resp.class_scores.values().sum();
    assert!(total > 0.0 && total.is_finite());
    let v = serde_json::to_value(&resp).unwrap();
    for key in ["predicted_label", "class_scores", "results", "query_overlay_url", "timing_ms"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}
