use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use imf::gateway::{router, AppState, ModelBundle, Registry, TelemetryFrame, SCHEMA_VERSION};
use imf::pipeline::{scenario_lower, train_lower_for, train_supervisors, ModelKind};
use imf::scenario::load_scenario;
use imf_core::agents::LowerTrainConfig;
use imf_core::supervisor::TrainConfig;
use imf_core::utility::UtilityForm;
use serde_json::{json, Value};
use tower::ServiceExt;

fn bundle(scenario: &str, lower_episodes: usize, episodes: usize) -> ModelBundle {
    let s = load_scenario(scenario).unwrap().0;
    let all = train_lower_for(&s.profile, LowerTrainConfig { episodes: lower_episodes, ..Default::default() }, 0).unwrap();
    let lower = scenario_lower(&s, &all).unwrap();
    let tc = TrainConfig { episodes, ..TrainConfig::default() };
    let mut t = train_supervisors(&s, &lower, tc, &[ModelKind::Proposed, ModelKind::Baseline]).unwrap();
    let baseline = t.pop().unwrap().model;
    let proposed = t.pop().unwrap().model;
    ModelBundle { profile: s.profile.clone(), lower, proposed, baseline }
}

fn quick_bundle() -> &'static Arc<ModelBundle> {
    static CELL: OnceLock<Arc<ModelBundle>> = OnceLock::new();
    CELL.get_or_init(|| Arc::new(bundle("scenario1", 300, 20)))
}

fn app() -> Router {
    let b = quick_bundle();
    let mut reg = Registry::default();
    reg.insert(ModelBundle {
        profile: b.profile.clone(),
        lower: b.lower.clone(),
        proposed: b.proposed.clone(),
        baseline: b.baseline.clone(),
    });
    let scenarios = ["scenario1", "scenario2", "exp1-log"].map(|n| load_scenario(n).unwrap().0);
    router(AppState::new(scenarios, reg))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn create(app: &Router, scenario: &str, model: &str) -> u64 {
    let (s, v) = call(app, Method::POST, "/sessions", Some(json!({"scenario": scenario, "model": model, "seed": 3}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_u64().unwrap()
}

async fn advance(app: &Router, id: u64, steps: usize) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/sessions/{id}/advance"), Some(json!({ "steps": steps }))).await
}

async fn patch(app: &Router, id: u64, body: Value) -> (StatusCode, Value) {
    call(app, Method::PATCH, &format!("/sessions/{id}/intents"), Some(body)).await
}

async fn stream_frames(app: &Router, id: u64) -> Vec<TelemetryFrame> {
    let req = Request::get(format!("/sessions/{id}/stream")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "application/x-ndjson");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    std::str::from_utf8(&bytes).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[tokio::test]
async fn sessions_are_created_with_distinct_ids() {
    let app = app();
    let a = create(&app, "scenario1", "proposed").await;
    let b = create(&app, "scenario1", "baseline").await;
    assert_ne!(a, b);
    let (s, v) = call(&app, Method::GET, &format!("/sessions/{a}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["status"].as_str(), v["step"].as_u64(), v["horizon"].as_u64()), (Some("paused"), Some(0), Some(20)));
}

#[tokio::test]
async fn bad_create_requests_are_rejected() {
    let app = app();
    for body in [
        json!({"scenario": "nope", "model": "proposed"}),
        json!({"scenario": "scenario1", "model": "oracle"}),
        // scarce profile: no bundle registered
        json!({"scenario": "exp1-log", "model": "proposed"}),
    ] {
        let (s, _) = call(&app, Method::POST, "/sessions", Some(body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
    }
    let (s, v) = call(&app, Method::GET, "/sessions/999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn advance_emits_one_frame_per_step_and_stops_at_horizon() {
    let app = app();
    let id = create(&app, "scenario1", "proposed").await;
    let (s, v) = advance(&app, id, 5).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["step"].as_u64(), v["frames"].as_u64()), (Some(5), Some(5)));
    let (_, v) = advance(&app, id, 100).await;
    assert_eq!((v["step"].as_u64(), v["frames"].as_u64(), v["status"].as_str()), (Some(20), Some(15), Some("finished")));
    let (s, _) = advance(&app, id, 1).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let frames = stream_frames(&app, id).await;
    let steps: Vec<usize> = frames.iter().map(|f| f.step).collect();
    assert_eq!(steps, (0..20).collect::<Vec<_>>());
    assert!(frames.iter().all(|f| f.schema_version == SCHEMA_VERSION && f.session == id));
    assert!(frames.iter().all(|f| f.expectations.len() == 3 && f.z <= 0.0));
    assert!(frames.iter().all(|f| f.goals.iter().all(|g| g.probability > 0.0)));
}

#[tokio::test]
async fn patch_shows_from_its_effective_step() {
    let app = app();
    let id = create(&app, "scenario1", "proposed").await;
    advance(&app, id, 5).await;
    let (s, v) = patch(&app, id, json!({"changes": [{"id": "urllc-pl", "form": "quadratic"}]})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["effective_step"].as_u64(), Some(5));
    let (_, view) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(view["pending"].as_array().unwrap().len(), 1);
    advance(&app, id, 100).await;
    for f in stream_frames(&app, id).await {
        let form = f.intents.iter().find(|e| e.id.as_str() == "urllc-pl").unwrap().form;
        let expected = if f.step >= 5 { UtilityForm::Quadratic } else { UtilityForm::Linear };
        assert_eq!(form, expected, "frame {}", f.step);
    }
}

#[tokio::test]
async fn queued_patches_apply_one_per_step() {
    let app = app();
    let id = create(&app, "scenario1", "proposed").await;
    let (_, a) = patch(&app, id, json!({"changes": [{"id": "cv-qoe", "priority": 4.0}]})).await;
    let (_, b) = patch(&app, id, json!({"changes": [{"id": "cv-qoe", "priority": 9.0}]})).await;
    assert_eq!((a["effective_step"].as_u64(), b["effective_step"].as_u64()), (Some(0), Some(1)));
    advance(&app, id, 3).await;
    advance(&app, id, 100).await;
    let p: Vec<f64> = stream_frames(&app, id)
        .await
        .iter()
        .take(3)
        .map(|f| f.intents.iter().find(|e| e.id.as_str() == "cv-qoe").unwrap().priority)
        .collect();
    assert_eq!(p, [4.0, 9.0, 9.0]);
}

#[tokio::test]
async fn empty_and_invalid_patches() {
    let app = app();
    let id = create(&app, "scenario1", "proposed").await;
    let (s, v) = patch(&app, id, json!({"changes": []})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["effective_step"].clone(), v["queued"].as_bool()), (Value::Null, Some(false)));
    for bad in [
        json!({"changes": [{"id": "nope", "priority": 2.0}]}),
        json!({"changes": [{"id": "cv-qoe", "priority": 0.0}]}),
        json!({"changes": [{"id": "cv-qoe", "priority": -1.0}]}),
    ] {
        let (s, _) = patch(&app, id, bad).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
    }
    // a rejected patch leaves nothing queued
    let (_, view) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert!(view["pending"].as_array().unwrap().is_empty());

    advance(&app, id, 19).await;
    patch(&app, id, json!({"changes": [{"id": "cv-qoe", "priority": 2.0}]})).await;
    let (s, _) = patch(&app, id, json!({"changes": [{"id": "cv-qoe", "priority": 3.0}]})).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn paused_session_emits_nothing() {
    let app = app();
    let id = create(&app, "scenario1", "proposed").await;
    let req = Request::get(format!("/sessions/{id}/stream")).body(Body::empty()).unwrap();
    let mut body = app.clone().oneshot(req).await.unwrap().into_body();
    assert!(tokio::time::timeout(Duration::from_millis(200), body.frame()).await.is_err());
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(v["step"].as_u64(), Some(0));
}

#[tokio::test]
async fn rate_runs_to_the_end_and_every_subscriber_sees_the_same_frames() {
    let app = app();
    let id = create(&app, "scenario1", "proposed").await;
    let early = tokio::spawn({
        let app = app.clone();
        async move { stream_frames(&app, id).await }
    });
    tokio::time::sleep(Duration::from_millis(50)).await;
    for bad in [-1.0, 5000.0] {
        let (s, _) = call(&app, Method::POST, &format!("/sessions/{id}/rate"), Some(json!({"steps_per_second": bad}))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
    }
    let (s, v) = call(&app, Method::POST, &format!("/sessions/{id}/rate"), Some(json!({"steps_per_second": 200.0}))).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("running")));
    let mid = tokio::spawn({
        let app = app.clone();
        async move {
            tokio::time::sleep(Duration::from_millis(40)).await;
            stream_frames(&app, id).await
        }
    });
    let a = tokio::time::timeout(Duration::from_secs(10), early).await.unwrap().unwrap();
    let b = mid.await.unwrap();
    assert_eq!(a.len(), 20);
    assert_eq!(a, b);
    let late = stream_frames(&app, id).await;
    assert_eq!(a, late);
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(v["status"].as_str(), Some("finished"));
}

#[tokio::test]
async fn model_checksum_is_stable_across_a_session() {
    let app = app();
    let expected = format!("{:016x}", quick_bundle().proposed.checksum());
    let id = create(&app, "scenario1", "proposed").await;
    let (_, before) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    patch(&app, id, json!({"changes": [{"id": "miot-pl", "priority": 7.0}]})).await;
    advance(&app, id, 100).await;
    let (_, after) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(before["model_checksum"].as_str(), Some(expected.as_str()));
    assert_eq!(after["model_checksum"], before["model_checksum"]);
    assert_eq!(quick_bundle().proposed.checksum(), u64::from_str_radix(&expected, 16).unwrap());
}

#[tokio::test]
async fn sessions_with_equal_seed_replay_identically() {
    let app = app();
    let a = create(&app, "scenario2", "proposed").await;
    let b = create(&app, "scenario2", "proposed").await;
    advance(&app, a, 20).await;
    advance(&app, b, 20).await;
    let strip = |fs: Vec<TelemetryFrame>| fs.into_iter().map(|mut f| { f.session = 0; f }).collect::<Vec<_>>();
    assert_eq!(strip(stream_frames(&app, a).await), strip(stream_frames(&app, b).await));
}
