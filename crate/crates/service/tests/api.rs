use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use coldstart_core::synthetic::{quick_setup, SyntheticConfig};
use coldstart_core::trainer::train_epoch;
use coldstart_core::{ModelBundle, ModelKind, TrainConfig};
use coldstart_service::{replay, router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn bundle(model: ModelKind) -> ModelBundle {
    static CACHE: OnceLock<[ModelBundle; 2]> = OnceLock::new();
    let pair = CACHE.get_or_init(|| {
        let setup = quick_setup(
            &SyntheticConfig {
                users: 120,
                movies: 60,
                seed: 4,
                ..SyntheticConfig::default()
            },
            12,
        )
        .unwrap();
        [ModelKind::QEmbedding, ModelKind::QRating].map(|model| {
            let config = TrainConfig {
                model,
                action_count: 25,
                users_per_batch: 30,
                seed: 4,
                ..TrainConfig::default()
            };
            let mut b = ModelBundle::initialise(&config, &setup.dataset, &setup.factors).unwrap();
            train_epoch(&mut b, &setup.dataset, &setup.split, 0, 0.5).unwrap();
            b
        })
    });
    match model {
        ModelKind::QEmbedding => pair[0].clone(),
        ModelKind::QRating => pair[1].clone(),
    }
}

fn app_with(bundle: Option<ModelBundle>, config: ServiceConfig) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(bundle, &config).unwrap());
    (router(state.clone(), &config), state)
}

fn app() -> Router {
    app_with(Some(bundle(ModelKind::QRating)), ServiceConfig::default()).0
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn start(app: &Router, k: Option<usize>) -> (String, Value) {
    let body = k.map(|k| json!({ "k": k }));
    let (status, v) = call(app, "POST", "/api/sessions", body).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    (v["session_id"].as_str().unwrap().to_string(), v)
}

async fn answer(app: &Router, id: &str, rating: i64) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        &format!("/api/sessions/{id}/answer"),
        Some(json!({ "rating": rating })),
    )
    .await
}

#[tokio::test]
async fn health_reports_model() {
    let (status, v) = call(&app(), "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        v,
        json!({ "status": "ok", "model": "q-rating", "action_space_size": 25 })
    );
}

#[tokio::test]
async fn no_bundle_is_unavailable() {
    let (app, _) = app_with(None, ServiceConfig::default());
    let (status, _) = call(&app, "POST", "/api/sessions", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, v) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "no-model");
}

#[tokio::test]
async fn fresh_sessions_share_first_question_and_default_length() {
    let app = app();
    let (a, va) = start(&app, None).await;
    let (b, vb) = start(&app, None).await;
    assert_ne!(a, b);
    assert_eq!(va["question"], vb["question"]);
    assert_eq!(va["progress"], json!({ "asked": 0, "total": 3 }));
    assert!(va["question"]["title"].is_string());
    assert!(va["question"]["genres"].is_array());
}

#[tokio::test]
async fn invalid_lengths_rejected() {
    let app = app();
    for k in [
        json!({ "k": 0 }),
        json!({ "k": -2 }),
        json!({ "k": 26 }),
        json!({ "q": 1 }),
    ] {
        let (status, v) = call(&app, "POST", "/api/sessions", Some(k)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn answer_validation_and_lifecycle() {
    let app = app();
    let (id, _) = start(&app, Some(3)).await;
    for bad in [6, -1] {
        let (status, _) = answer(&app, &id, bad).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
    }
    let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = call(&app, "GET", &format!("/api/sessions/{id}/recommendations"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, v) = answer(&app, &id, 0).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["finished"], false);
    assert_eq!(v["progress"]["asked"], 1);
    assert_eq!(v["history"][0]["rating"], 0);

    // The unseen answer leaves a zero rating behind a set asked flag.
    let (_, q) = call(&app, "GET", &format!("/api/sessions/{id}/q-values"), None).await;
    let state: Vec<f64> = serde_json::from_value(q["state"].clone()).unwrap();
    let asked: Vec<usize> = (0..25).filter(|&s| state[2 * s] == 1.0).collect();
    assert_eq!(asked.len(), 1);
    assert_eq!(state[2 * asked[0] + 1], 0.0);

    answer(&app, &id, 4).await;
    let (status, v) = answer(&app, &id, 5).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["finished"], true);
    assert!(v.get("question").is_none());
    assert_eq!(v["recommendations"].as_array().unwrap().len(), 10);

    let (status, _) = answer(&app, &id, 3).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let app = app();
    for (method, uri) in [
        ("POST", "/api/sessions/nope/answer"),
        ("GET", "/api/sessions/nope/recommendations"),
        ("GET", "/api/sessions/nope"),
    ] {
        let body = (method == "POST").then(|| json!({ "rating": 3 }));
        let (status, _) = call(&app, method, uri, body).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn recommendations_are_sorted_clipped_and_exclude_rated() {
    for model in [ModelKind::QEmbedding, ModelKind::QRating] {
        let b = bundle(model);
        let (app, _) = app_with(Some(b.clone()), ServiceConfig::default());
        let (id, _) = start(&app, Some(3)).await;
        let mut rated = Vec::new();
        for r in [5, 0, 2] {
            let (_, v) = answer(&app, &id, r).await;
            let last = v["history"].as_array().unwrap().last().unwrap().clone();
            if r >= 1 {
                rated.push(last["movie_id"].as_u64().unwrap());
            }
        }
        let (status, v) = call(&app, "GET", &format!("/api/sessions/{id}/recommendations?n=10"), None).await;
        assert_eq!(status, StatusCode::OK);
        let list = v["recommendations"].as_array().unwrap();
        assert_eq!(list.len(), 10);
        let scores: Vec<f64> = list.iter().map(|r| r["predicted_rating"].as_f64().unwrap()).collect();
        assert!(scores.iter().all(|p| (1.0..=5.0).contains(p)));
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        for r in list {
            assert!(!rated.contains(&r["movie_id"].as_u64().unwrap()));
        }
        let (_, all) = call(&app, "GET", &format!("/api/sessions/{id}/recommendations?n=1000"), None).await;
        assert_eq!(
            all["recommendations"].as_array().unwrap().len(),
            b.movie_count() - rated.len()
        );
    }
}

#[tokio::test]
async fn stored_state_replays_and_questions_never_repeat() {
    let b = bundle(ModelKind::QEmbedding);
    let (app, state) = app_with(Some(b.clone()), ServiceConfig::default());
    let (id, _) = start(&app, Some(25)).await;
    let answers: Vec<i64> = (0..25).map(|i| (i * 7 % 6) as i64).collect();
    for &r in &answers {
        answer(&app, &id, r).await;
    }
    let handle = state.sessions.get(&id).unwrap();
    let s = handle.lock().unwrap();
    let slots: std::collections::HashSet<usize> = s.asked.iter().map(|q| q.slot).collect();
    assert_eq!(slots.len(), 25);
    assert_eq!(replay(&b, &s.answers()).unwrap(), s.state);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let config = ServiceConfig {
        idle_timeout: Duration::from_millis(30),
        ..ServiceConfig::default()
    };
    let (app, state) = app_with(Some(bundle(ModelKind::QRating)), config);
    let (id, _) = start(&app, None).await;
    tokio::time::sleep(Duration::from_millis(60)).await;
    let (status, _) = answer(&app, &id, 3).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    start(&app, None).await;
    tokio::time::sleep(Duration::from_millis(60)).await;
    assert_eq!(state.sessions.sweep(), 1);
    assert!(state.sessions.is_empty());
}

#[tokio::test]
async fn journal_restores_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        journal: Some(dir.path().join("sessions.jsonl")),
        ..ServiceConfig::default()
    };
    let b = bundle(ModelKind::QRating);
    let (app, _) = app_with(Some(b.clone()), config.clone());
    let (id, _) = start(&app, Some(3)).await;
    answer(&app, &id, 4).await;
    let (_, before) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;

    let (restarted, _) = app_with(Some(b), config);
    let (status, after) = call(&restarted, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before, after);
    let (status, _) = answer(&restarted, &id, 2).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn cors_headers_present() {
    let req = Request::builder()
        .uri("/api/health")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}
