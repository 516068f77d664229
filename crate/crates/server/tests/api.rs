use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use intseg::cascade::{interactive_step, Pipeline, Segmenter, SessionState, Strategy, ZoomConfig};
use intseg::clicks::{Click, Polarity};
use intseg::data_io::{generate_scene, image_to_png, SceneConfig, ShapeKind};
use intseg::mask::{BinMask, ProbMask, Rle};
use intseg::model::{Model, ModelConfig};
use intseg::tensor::Tensor;
use intseg_server::{router, AppState, ServerConfig};
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tower::ServiceExt;

/// Lights up a square of side 9 around every positive click and clears one
/// around every negative click, in click order.
struct Squares {
    delay: Duration,
}

impl Segmenter for Squares {
    fn predict(&self, image: &Tensor, _: &ProbMask, clicks: &[Click]) -> intseg::Result<ProbMask> {
        std::thread::sleep(self.delay);
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let mut p = ProbMask::zeros(h, w);
        for c in clicks {
            let v = if c.polarity == Polarity::Positive { 1.0 } else { 0.0 };
            for r in c.row.saturating_sub(4)..(c.row + 5).min(h) {
                for col in c.col.saturating_sub(4)..(c.col + 5).min(w) {
                    p.data_mut()[r * w + col] = v;
                }
            }
        }
        Ok(p)
    }
}

fn stub_app(delay: Duration, cfg: ServerConfig) -> (Arc<AppState>, Router) {
    let pipeline = Pipeline::coarse_only(Arc::new(Squares { delay }), ZoomConfig::default());
    let app = AppState::new(pipeline, cfg);
    (app.clone(), router(app))
}

fn stub() -> Router {
    stub_app(Duration::ZERO, ServerConfig::default()).1
}

fn model_pipeline() -> Pipeline {
    let cfg = ModelConfig {
        low_channels: 4,
        high_channels: 8,
        ..ModelConfig::default()
    };
    Pipeline::cascade(
        Arc::new(Model::init(cfg, 1)),
        Arc::new(Model::init(cfg, 2)),
        Strategy::CoarseToFine,
        ZoomConfig::default(),
    )
}

async fn call(app: &Router, method: &str, uri: &str, body: Body, content_type: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header("content-type", ct);
    }
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = match body {
        Some(v) => call(app, method, uri, Body::from(v.to_string()), Some("application/json")).await,
        None => call(app, method, uri, Body::empty(), None).await,
    };
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn generated(app: &Router, kind: &str, seed: u64) -> String {
    let (status, v) = call_json(app, "POST", "/sessions", Some(json!({"generate": {"kind": kind, "seed": seed}}))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn click(app: &Router, id: &str, row: i64, col: i64, polarity: &str) -> (StatusCode, Value) {
    call_json(
        app,
        "POST",
        &format!("/sessions/{id}/clicks"),
        Some(json!({"row": row, "col": col, "polarity": polarity})),
    )
    .await
}

fn mask_of(v: &Value) -> BinMask {
    let rle: Rle = serde_json::from_value(v["mask"].clone()).unwrap();
    assert_eq!(rle.order, "row-major");
    BinMask::from_rle(&rle).unwrap()
}

fn png_of(h: usize, w: usize) -> Vec<u8> {
    image_to_png(&Tensor::from_fn([3, h, w], |i| (i % 17) as f64 / 16.0)).unwrap()
}

#[tokio::test]
async fn upload_creates_session_with_original_dims() {
    let app = stub();
    let (status, bytes) = call(&app, "POST", "/sessions", Body::from(png_of(30, 45)), Some("image/png")).await;
    assert_eq!(status, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!((v["height"].as_u64(), v["width"].as_u64()), (Some(30), Some(45)));
    let id = v["session_id"].as_str().unwrap();
    let (status, info) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((info["height"].as_u64(), info["width"].as_u64()), (Some(30), Some(45)));
    assert_eq!(info["step"], 0);
    assert_eq!(info["has_gt"], false);

    // clicks near the padded edge stay inside the reported frame
    let (status, v) = click(&app, id, 29, 44, "positive").await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let mask = mask_of(&v);
    assert_eq!(mask.dims(), (30, 45));
    assert!(mask.get(29, 44));
    assert!(v["iou"].is_null());
}

#[tokio::test]
async fn corrupt_and_oversized_uploads_are_rejected() {
    let app = stub();
    let (status, bytes) = call(&app, "POST", "/sessions", Body::from(&b"definitely not a png"[..]), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    assert!(v["error"].as_str().unwrap().contains("PNG"));

    let mut truncated = png_of(20, 20);
    truncated.truncate(40);
    let (status, _) = call(&app, "POST", "/sessions", Body::from(truncated), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, bytes) = call(&app, "POST", "/sessions", Body::from(png_of(8, 1025)), None).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert!(serde_json::from_slice::<Value>(&bytes).is_ok());

    let (_, small) = stub_app(
        Duration::ZERO,
        ServerConfig {
            max_body: 1000,
            ..ServerConfig::default()
        },
    );
    let (status, _) = call(&small, "POST", "/sessions", Body::from(vec![0u8; 5000]), None).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn generated_scene_reports_live_iou() {
    let app = stub();
    let id = generated(&app, "ring", 7).await;
    let scene = generate_scene(7, &SceneConfig::default(), Some(ShapeKind::Ring)).unwrap();
    let (r, c) = (0..scene.gt.height() * scene.gt.width())
        .find(|&i| scene.gt.data()[i])
        .map(|i| (i / scene.gt.width(), i % scene.gt.width()))
        .unwrap();
    let (status, v) = click(&app, &id, r as i64, c as i64, "positive").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["step"], 1);
    let mask = mask_of(&v);
    assert!(mask.count() > 0);
    let inter = mask.data().iter().zip(scene.gt.data()).filter(|(a, b)| **a && **b).count();
    let union = mask.data().iter().zip(scene.gt.data()).filter(|(a, b)| **a || **b).count();
    assert_eq!(v["iou"].as_f64().unwrap(), inter as f64 / union as f64);
    assert_eq!(v["prob_png_url"], format!("/sessions/{id}/prob.png?step=1"));
    assert_eq!(v["clicks"][0]["polarity"], "positive");

    let (status, png) = call(&app, "GET", &format!("/sessions/{id}/prob.png"), Body::empty(), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");

    let (status, v) = call_json(&app, "POST", "/sessions", Some(json!({"generate": {"kind": "hexagon"}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
}

#[tokio::test]
async fn click_errors_map_to_status_codes() {
    let app = stub();
    let id = generated(&app, "disk", 3).await;
    assert_eq!(click(&app, &id, 10, 10, "positive").await.0, StatusCode::OK);
    let (_, before) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;

    assert_eq!(click(&app, &id, 10, 10, "negative").await.0, StatusCode::CONFLICT);
    assert_eq!(click(&app, &id, 96, 0, "positive").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(click(&app, &id, 0, 144, "positive").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(click(&app, &id, -1, 0, "positive").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(click(&app, &id, 1, 1, "sideways").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(click(&app, "nope", 1, 1, "positive").await.0, StatusCode::NOT_FOUND);

    let (_, after) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(before, after);
}

#[tokio::test]
async fn undo_restores_prior_state_and_delete_tears_down() {
    let app = stub();
    let id = generated(&app, "blob", 5).await;
    let undo_uri = format!("/sessions/{id}/undo");
    assert_eq!(call_json(&app, "POST", &undo_uri, None).await.0, StatusCode::CONFLICT);

    let (_, first) = click(&app, &id, 20, 20, "positive").await;
    let (_, info_one) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    let (_, second) = click(&app, &id, 22, 22, "negative").await;
    assert_eq!(second["step"], 2);

    let (status, undone) = call_json(&app, "POST", &undo_uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(undone["step"], 1);
    assert_eq!(undone["mask"], first["mask"]);
    assert_eq!(call_json(&app, "GET", &format!("/sessions/{id}"), None).await.1, info_one);

    let (_, replay) = click(&app, &id, 22, 22, "negative").await;
    assert_eq!(replay, second);

    let (status, _) = call_json(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert_eq!(call_json(&app, "GET", &format!("/sessions/{id}"), None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(click(&app, &id, 1, 1, "positive").await.0, StatusCode::NOT_FOUND);
    assert_eq!(call_json(&app, "DELETE", &format!("/sessions/{id}"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn click_budget_bounds_history() {
    let (_, app) = stub_app(
        Duration::ZERO,
        ServerConfig {
            max_clicks: 2,
            ..ServerConfig::default()
        },
    );
    let id = generated(&app, "disk", 1).await;
    assert_eq!(click(&app, &id, 1, 1, "positive").await.0, StatusCode::OK);
    assert_eq!(click(&app, &id, 2, 2, "positive").await.0, StatusCode::OK);
    assert_eq!(click(&app, &id, 3, 3, "positive").await.0, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_mutation_is_rejected_not_interleaved() {
    let (_, app) = stub_app(Duration::from_millis(600), ServerConfig::default());
    let id = generated(&app, "disk", 2).await;
    let slow = {
        let (app, id) = (app.clone(), id.clone());
        tokio::spawn(async move { click(&app, &id, 30, 30, "positive").await })
    };
    tokio::time::sleep(Duration::from_millis(150)).await;
    assert_eq!(click(&app, &id, 31, 31, "positive").await.0, StatusCode::CONFLICT);
    assert_eq!(call_json(&app, "POST", &format!("/sessions/{id}/undo"), None).await.0, StatusCode::CONFLICT);
    let (status, v) = slow.await.unwrap();
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["step"], 1);
    let (_, info) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(info["step"], 1);
    assert_eq!(info["clicks"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let (state, app) = stub_app(
        Duration::ZERO,
        ServerConfig {
            session_ttl: Duration::from_secs(60),
            ..ServerConfig::default()
        },
    );
    let old = generated(&app, "disk", 1).await;
    let _fresh = generated(&app, "disk", 2).await;
    assert_eq!(state.sweep_expired(Instant::now()), 0);
    assert_eq!(state.session_count(), 2);
    assert_eq!(state.sweep_expired(Instant::now() + Duration::from_secs(61)), 2);
    assert_eq!(call_json(&app, "GET", &format!("/sessions/{old}"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn api_replay_matches_library_bit_for_bit() {
    let app = router(AppState::new(model_pipeline(), ServerConfig::default()));
    let id = generated(&app, "ring", 11).await;
    let scene = generate_scene(11, &SceneConfig::default(), Some(ShapeKind::Ring)).unwrap();
    let script = [(40, 70, Polarity::Positive), (10, 12, Polarity::Negative), (60, 100, Polarity::Positive)];

    let pipeline = model_pipeline();
    let mut lib = SessionState::new(scene.image.clone()).unwrap();
    for &(r, c, pol) in &script {
        let out = interactive_step(&mut lib, Click::new(r, c, pol, 0), &pipeline).unwrap();
        let name = if pol == Polarity::Positive { "positive" } else { "negative" };
        let (status, v) = click(&app, &id, r as i64, c as i64, name).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(mask_of(&v), out.prob.binarize(0.5));
        let region = serde_json::to_value(out.region).unwrap();
        assert_eq!(v["region"], region);
    }

    // undo back to the start, replay, and land on the same mask
    let (_, last) = click(&app, &id, 5, 5, "negative").await;
    for _ in 0..4 {
        assert_eq!(call_json(&app, "POST", &format!("/sessions/{id}/undo"), None).await.0, StatusCode::OK);
    }
    let (_, zero) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(zero["step"], 0);
    let mut replay = Value::Null;
    for (r, c, pol) in script.iter().map(|&(r, c, p)| (r, c, p)).chain([(5, 5, Polarity::Negative)]) {
        let name = if pol == Polarity::Positive { "positive" } else { "negative" };
        replay = click(&app, &id, r as i64, c as i64, name).await.1;
    }
    assert_eq!(replay, last);
}

#[tokio::test]
async fn survives_fuzzed_requests() {
    let app = stub();
    let id = generated(&app, "disk", 9).await;
    let mut rng = rand::rngs::StdRng::seed_from_u64(17);
    let uris = [
        "/sessions".to_string(),
        format!("/sessions/{id}"),
        format!("/sessions/{id}/clicks"),
        format!("/sessions/{id}/undo"),
        format!("/sessions/{id}/prob.png"),
        "/sessions/../etc/passwd".into(),
        "/no/such/route".into(),
        "/sessions/%ff%00/clicks".into(),
    ];
    let methods = ["GET", "POST", "PUT", "DELETE", "PATCH"];
    let payloads: Vec<Vec<u8>> = vec![
        b"{".to_vec(),
        b"{\"row\": 1e999, \"col\": 2, \"polarity\": \"positive\"}".to_vec(),
        b"{\"row\": \"1\", \"col\": 2}".to_vec(),
        b"{\"generate\": {\"kind\": 5}}".to_vec(),
        b"[]".to_vec(),
        b"null".to_vec(),
        vec![0xff; 64],
        vec![b'a'; 20 << 20],
    ];
    for i in 0..200 {
        let uri = &uris[rng.gen_range(0..uris.len())];
        let method = methods[rng.gen_range(0..methods.len())];
        let body = if i % 5 == 0 {
            (0..rng.gen_range(0..256)).map(|_| rng.gen::<u8>()).collect()
        } else {
            payloads[rng.gen_range(0..payloads.len())].clone()
        };
        let ct = if rng.gen_bool(0.5) { Some("application/json") } else { None };
        let (status, _) = call(&app, method, uri, Body::from(body), ct).await;
        assert!(!status.is_server_error(), "{method} {uri} -> {status}");
    }
    let (status, v) = call_json(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["sessions"].is_u64());
}

#[tokio::test]
async fn unknown_routes_get_json_404() {
    let app = stub();
    let (status, v) = call_json(&app, "GET", "/definitely/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn static_bundle_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let (_, app) = stub_app(
        Duration::ZERO,
        ServerConfig {
            static_dir: Some(dir.path().to_path_buf()),
            ..ServerConfig::default()
        },
    );
    let (status, body) = call(&app, "GET", "/", Body::empty(), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>ui</html>");
    let (status, _) = call(&app, "GET", "/missing.js", Body::empty(), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(call_json(&app, "GET", "/health", None).await.0, StatusCode::OK);
}
