use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use ci3p3_service::{router, AppState, Store};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &std::path::Path) -> Router {
    router(AppState { store: Arc::new(Store::open(dir).unwrap()) }, None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

async fn create(app: &Router, rows: u32, cols: u32, max_n: u32) -> String {
    let (status, body) =
        call(app, "POST", "/trials", Some(json!({ "grid": { "rows": rows, "cols": cols }, "params": { "max_n": max_n } }))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["version"], 0);
    assert_eq!(body["view"]["recommendation"], json!({ "assign": { "i": 1, "j": 1 } }));
    body["id"].as_str().unwrap().to_string()
}

async fn post_cohort(app: &Router, id: &str, i: u32, j: u32, dlt: u32, version: u64) -> (StatusCode, Value) {
    call(app, "POST", &format!("/trials/{id}/cohorts"), Some(json!({ "dc": { "i": i, "j": j }, "dlt": dlt, "version": version }))).await
}

const GOLDEN: [(u32, u32, u32); 10] =
    [(1, 1, 0), (2, 1, 0), (2, 2, 2), (2, 1, 1), (3, 1, 0), (3, 2, 1), (3, 2, 1), (3, 2, 0), (3, 3, 3), (3, 2, 0)];

#[tokio::test]
async fn golden_trial_through_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 3, 3, 30).await;
    for (k, &(i, j, y)) in GOLDEN.iter().enumerate() {
        let (status, body) = post_cohort(&app, &id, i, j, y, k as u64).await;
        assert_eq!(status, StatusCode::OK, "cohort {}: {body}", k + 1);
        assert_eq!(body["version"], k as u64 + 1);
    }
    let (_, rec) = call(&app, "GET", &format!("/trials/{id}/recommendation"), None).await;
    assert_eq!(rec["recommendation"], json!({ "stop": "max_n" }));
    let (status, result) = call(&app, "POST", &format!("/trials/{id}/finalize"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(result["selected"], json!({ "i": 3, "j": 2 }));
    assert_eq!(result["overridden_cohorts"], 0);

    let (_, state) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    assert_eq!(state["events"].as_array().unwrap().len(), 10);
    let d33 = state["view"]["cells"].as_array().unwrap().iter().find(|c| c["dc"] == json!({ "i": 3, "j": 3 })).unwrap();
    assert_eq!(d33["excluded"], true);

    let (status, err) = post_cohort(&app, &id, 3, 2, 0, 10).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["code"], "trial_stopped");
}

#[tokio::test]
async fn stale_version_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 2, 2, 12).await;
    assert_eq!(post_cohort(&app, &id, 1, 1, 0, 0).await.0, StatusCode::OK);
    let (status, err) = post_cohort(&app, &id, 2, 1, 0, 0).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["code"], "version_conflict");
    assert_eq!(err["detail"], json!({ "expected": 0, "actual": 1 }));
    assert!(err["message"].is_string());
}

#[tokio::test]
async fn concurrent_posts_one_winner_per_version() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 3, 3, 30).await;
    let (a, b) = tokio::join!(post_cohort(&app, &id, 1, 1, 0, 0), post_cohort(&app, &id, 1, 1, 1, 0));
    let ok = [a.0, b.0].iter().filter(|s| **s == StatusCode::OK).count();
    let conflict = [a.0, b.0].iter().filter(|s| **s == StatusCode::CONFLICT).count();
    assert_eq!((ok, conflict), (1, 1));
    let (_, state) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    assert_eq!(state["version"], 1);
}

#[tokio::test]
async fn override_is_required_and_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 3, 3, 30).await;
    let (status, err) = post_cohort(&app, &id, 1, 2, 0, 0).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "not_recommended");
    assert_eq!(err["detail"]["recommended"], json!({ "assign": { "i": 1, "j": 1 } }));

    let body = json!({ "dc": { "i": 1, "j": 2 }, "dlt": 0, "version": 0, "override": true });
    let (status, resp) = call(&app, "POST", &format!("/trials/{id}/cohorts"), Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{resp}");
    assert_eq!(resp["events"][0]["override"], true);
    let (_, result) = call(&app, "POST", &format!("/trials/{id}/finalize"), None).await;
    assert_eq!(result["overridden_cohorts"], 1);
}

#[tokio::test]
async fn what_if_is_a_pure_preview() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 3, 3, 30).await;
    for (k, &(i, j, y)) in GOLDEN[..3].iter().enumerate() {
        post_cohort(&app, &id, i, j, y, k as u64).await;
    }
    let (_, before) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    let mut previews = Vec::new();
    for y in 0..=3 {
        let (status, p) = call(&app, "POST", &format!("/trials/{id}/what-if"), Some(json!({ "dlt": y }))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(p["version"], 3);
        previews.push(p["step"]["next"].clone());
    }
    let (_, after) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    assert_eq!(before, after);
    // The preview for the outcome that then happens matches the real step.
    let (_, actual) = post_cohort(&app, &id, 2, 1, 1, 3).await;
    assert_eq!(actual["step"]["next"], previews[1]);
    assert_eq!(previews[1], json!({ "assign": { "i": 3, "j": 1 } }));

    let (status, err) = call(&app, "POST", &format!("/trials/{id}/what-if"), Some(json!({ "dlt": 4 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "invalid_observation");
}

#[tokio::test]
async fn view_exposes_posteriors_and_candidate_sets() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 3, 3, 30).await;
    post_cohort(&app, &id, 1, 1, 0, 0).await;
    let (_, state) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    let view = &state["view"];
    assert_eq!(view["current"], json!({ "i": 2, "j": 1 }));
    assert_eq!(view["stage"], "stage_i");
    let d11 = &view["cells"][0];
    assert_eq!((d11["y"].as_u64(), d11["n"].as_u64()), (Some(0), Some(3)));
    assert!((d11["xi"].as_f64().unwrap() - (0.75f64.powi(4) - 0.65f64.powi(4))).abs() < 1e-12);
    assert_eq!(view["candidate_sets"]["escalate"].as_array().unwrap().len(), 2);
    assert_eq!(view["candidate_sets"]["deescalate"][0]["dc"], json!({ "i": 1, "j": 1 }));
}

#[tokio::test]
async fn decision_table_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 2, 2, 12).await;
    let (status, table) = call(&app, "GET", &format!("/trials/{id}/decision-table?n_max=6"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(table["n_max"], 6);
    let cells = table["cells"].as_array().unwrap();
    assert_eq!(cells.len(), (1..=6).map(|n| n + 1).sum::<usize>());
    let at = |n: u64, y: u64| cells.iter().find(|c| c["n"] == n && c["y"] == y).unwrap()["decision"].clone();
    assert_eq!((at(3, 0), at(3, 1), at(3, 2), at(3, 3)), (json!("E"), json!("S"), json!("D"), json!("DU")));
}

#[tokio::test]
async fn request_errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, err) = call(&app, "GET", "/trials/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "not_found");

    let (status, err) = call(&app, "POST", "/trials", Some(json!({ "grid": { "rows": 3, "cols": 3 }, "bogus": 1 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "bad_request");

    let bad = json!({ "grid": { "rows": 3, "cols": 3 }, "params": { "max_n": 31 } });
    let (status, err) = call(&app, "POST", "/trials", Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "invalid_params");

    let id = create(&app, 2, 2, 12).await;
    let (status, err) = post_cohort(&app, &id, 5, 5, 0, 0).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{err}");
}

#[tokio::test]
async fn trials_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id;
    let before;
    {
        let app = app(dir.path());
        id = create(&app, 3, 3, 30).await;
        for (k, &(i, j, y)) in GOLDEN.iter().enumerate() {
            post_cohort(&app, &id, i, j, y, k as u64).await;
        }
        before = call(&app, "GET", &format!("/trials/{id}"), None).await.1;
    }
    assert!(dir.path().join(&id).join("snapshot.json").is_file());
    let app = app(dir.path());
    let after = call(&app, "GET", &format!("/trials/{id}"), None).await.1;
    assert_eq!(before, after);
}

#[tokio::test]
async fn tampered_event_log_is_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let app = app(dir.path());
        let id = create(&app, 3, 3, 30).await;
        post_cohort(&app, &id, 1, 1, 0, 0).await;
        post_cohort(&app, &id, 2, 1, 0, 1).await;
        id
    };
    let path = dir.path().join(&id).join("events.jsonl");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"stage\":\"stage_i\"", "\"stage\":\"stage_ii\"", 1);
    std::fs::write(&path, text).unwrap();
    let err = Store::open(dir.path()).err().expect("tampered log must not load");
    assert!(err.to_string().contains("integrity"), "{err}");
}

#[tokio::test]
async fn serves_static_assets() {
    let dir = tempfile::tempdir().unwrap();
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<html>conduct</html>").unwrap();
    let app = router(AppState { store: Arc::new(Store::open(dir.path()).unwrap()) }, Some(assets.path().to_path_buf()));
    let resp = app.oneshot(Request::builder().uri("/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], b"<html>conduct</html>");
}
