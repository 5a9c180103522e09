use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use elicit_core::belief::{McmcConfig, McmcMode, PosteriorMethod};
use elicit_core::catalog::{save_catalog, ItemCatalog};
use elicit_core::cav::{save_cavs, Cav};
use elicit_core::response::{Query, QueryWire, Response, ResponseWire};
use elicit_core::session::Elicitor;
use elicit_core::Vector;
use elicit_service::session::{CatalogSet, DEFAULT_SET};
use elicit_service::{router, AppState, ErrorBody, SessionConfig, SessionView};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use std::path::Path;
use tower::ServiceExt;

fn write_set(dir: &Path, n_items: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let catalog = ItemCatalog::from_embeddings((0..n_items).map(|i| {
        let v = Vector::from_fn(3, |j, _| ((i * 7 + j * 3) as f64 * 0.61 + seed as f64).sin());
        (format!("m{i:02}"), v)
    }))
    .unwrap();
    save_catalog(&catalog, &dir.join("catalog.jsonl")).unwrap();
    let cavs = vec![
        Cav::new("funny", Vector::from_vec(vec![1.0, 0.2, -0.3]), 0.3).unwrap(),
        Cav::new("dark", Vector::from_vec(vec![-0.2, 0.9, 0.4]), 0.3).unwrap(),
    ];
    save_cavs(&cavs, &dir.join("cavs.jsonl")).unwrap();
}

fn data_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_set(dir.path(), 30, 1);
    write_set(&dir.path().join("small"), 8, 2);
    dir
}

fn fast_config() -> Value {
    json!({
        "slate_size": 3,
        "seed": 42,
        "acquisition": {"n_user_samples": 60},
        "optimizer": {"n_candidates": 10},
        "posterior": {"method": "mcmc", "mode": "iterative", "n_particles": 150, "move_steps": 3}
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn error_code(v: &Value) -> String {
    serde_json::from_value::<ErrorBody>(v.clone()).unwrap().error
}

async fn create(app: &Router, cfg: Value) -> String {
    let (status, body) = call(app, "POST", "/sessions", Some(cfg)).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

/// A valid answer to the query in `view`: first item, and "more" where asked.
fn answer(view: &Value) -> Value {
    let first = view["slate"][0]["id"].clone();
    match view["type"].as_str().unwrap() {
        "item" => json!({"choice": first}),
        "attribute" => json!({"direction": 1}),
        _ => json!({"choice": first, "direction": -1}),
    }
}

#[tokio::test]
async fn healthz_and_create() {
    let dir = data_dir();
    let state = AppState::open(dir.path()).unwrap();
    assert_eq!(state.set_names(), vec![DEFAULT_SET.to_string(), "small".to_string()]);
    let app = router(state);
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((status, body), (StatusCode::OK, json!({"status": "ok"})));

    let (status, body) = call(&app, "POST", "/sessions", Some(fast_config())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["recommendations"].as_array().unwrap().len(), 5);
    assert_eq!(body["seed"], 42);
    let a = body["session_id"].as_str().unwrap().to_string();
    let b = create(&app, fast_config()).await;
    assert_ne!(a, b);

    let (status, body) = call(&app, "POST", "/sessions", Some(json!({"catalog": "nope"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "not_found");
    let msg = body["message"].as_str().unwrap();
    assert!(msg.contains("default") && msg.contains("small"), "{msg}");

    let (status, body) = call(&app, "POST", "/sessions", Some(json!({"slate_size": "five"}))).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
    let (status, body) = call(&app, "POST", "/sessions", Some(json!({"slate_size": 50}))).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
}

#[tokio::test]
async fn fresh_session_state_and_idempotent_query() {
    let dir = data_dir();
    let app = router(AppState::open(dir.path()).unwrap());
    let id = create(&app, fast_config()).await;
    let (status, s0) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let view: SessionView = serde_json::from_value(s0.clone()).unwrap();
    assert_eq!(view.step, 0);
    assert!(view.history.is_empty());
    assert!(view.pending_query.is_none());
    assert_eq!(view.belief.kind, "gaussian");
    let (_, again) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s0, again);

    let (status, q1) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(q1["type"], "ipa");
    assert_eq!(q1["slate"].as_array().unwrap().len(), 3);
    assert!(["funny", "dark"].contains(&q1["tag"].as_str().unwrap()));
    let (_, q2) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
    assert_eq!(q1, q2);

    let (status, body) = call(&app, "GET", "/sessions/missing/query", None).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "not_found"));
}

#[tokio::test]
async fn state_machine_violations_leave_state_unchanged() {
    let dir = data_dir();
    let app = router(AppState::open(dir.path()).unwrap());
    let mut cfg = fast_config();
    cfg["query_type"] = json!("item");
    let id = create(&app, cfg).await;
    let state = |app: Router| {
        let id = id.clone();
        async move { call(&app, "GET", &format!("/sessions/{id}"), None).await.1 }
    };

    // answer before any query
    let before = state(app.clone()).await;
    let (status, body) = call(&app, "POST", &format!("/sessions/{id}/response"), Some(json!({"choice": "m00"}))).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::CONFLICT, "no_pending_query"));
    assert_eq!(state(app.clone()).await, before);

    let (_, q) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
    let pending = state(app.clone()).await;

    // direction for an item query
    let (status, body) = call(&app, "POST", &format!("/sessions/{id}/response"), Some(json!({"direction": 1}))).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "invalid_response"));
    // choice outside the slate
    let slate: Vec<&str> = q["slate"].as_array().unwrap().iter().map(|v| v["id"].as_str().unwrap()).collect();
    let outside = (0..30).map(|i| format!("m{i:02}")).find(|m| !slate.contains(&m.as_str())).unwrap();
    let (status, body) = call(&app, "POST", &format!("/sessions/{id}/response"), Some(json!({"choice": outside}))).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "invalid_response"));
    // unknown item and malformed body
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/response"), Some(json!({"choice": "zzz"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, body) = call(&app, "POST", &format!("/sessions/{id}/response"), Some(json!({"choice": 3}))).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
    assert_eq!(state(app.clone()).await, pending);

    // valid answer, then the same answer again
    let ans = answer(&q);
    let (status, update) = call(&app, "POST", &format!("/sessions/{id}/response"), Some(ans.clone())).await;
    assert_eq!(status, StatusCode::OK, "{update}");
    assert_eq!(update["step"], 1);
    assert_eq!(update["recommendations"].as_array().unwrap().len(), 5);
    let after = state(app.clone()).await;
    assert_eq!(after["history"][0]["response"], ans);
    let (status, body) = call(&app, "POST", &format!("/sessions/{id}/response"), Some(ans)).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::CONFLICT, "already_answered"));
    assert_eq!(state(app.clone()).await, after);

    // unknown session
    let (status, body) = call(&app, "POST", "/sessions/nope/response", Some(json!({"choice": "m00"}))).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "not_found"));
}

#[tokio::test]
async fn served_belief_matches_offline_replay_and_restart() {
    let dir = data_dir();
    let state = AppState::open(dir.path()).unwrap();
    let app = router(state);
    let id = create(&app, fast_config()).await;
    for k in 0..5 {
        let (_, q) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
        let (status, update) = call(&app, "POST", &format!("/sessions/{id}/response"), Some(answer(&q))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(update["step"], k + 1);
    }
    let (_, live) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let view: SessionView = serde_json::from_value(live.clone()).unwrap();
    assert_eq!(view.history.len(), 5);

    // offline replay of the logged (query, response) sequence
    let set = CatalogSet::load(DEFAULT_SET, dir.path()).unwrap();
    let cfg: SessionConfig = serde_json::from_value(fast_config()).unwrap();
    let mut offline = Elicitor::new(set.catalog.clone(), set.semantics.clone(), set.prior.clone(), cfg.elicitor_config(), 42).unwrap();
    for h in &view.history {
        let q = Query::from_wire(&h.query, &set.catalog, &set.semantics).unwrap();
        assert_eq!(offline.propose().unwrap(), q);
        offline.observe(q, Response::from_wire(&h.response, &set.catalog).unwrap()).unwrap();
    }
    let served = serde_json::to_string(&view.belief.mean).unwrap();
    let replayed = serde_json::to_string(&offline.belief().snapshot(None).mean).unwrap();
    assert_eq!(served, replayed);

    // a restarted server rebuilds the same state from the event log
    let restarted = router(AppState::open(dir.path()).unwrap());
    let (_, again) = call(&restarted, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&live).unwrap());
    let log = std::fs::read_to_string(dir.path().join("sessions").join(format!("{id}.ndjson"))).unwrap();
    let events: Vec<&str> = log.lines().collect();
    assert_eq!(events.len(), 11);
    assert!(events[0].contains("\"event\":\"create\""));
}

#[tokio::test]
async fn pending_query_survives_restart() {
    let dir = data_dir();
    let app = router(AppState::open(dir.path()).unwrap());
    let mut cfg = fast_config();
    cfg["catalog"] = json!("small");
    cfg["query_type"] = json!("attribute");
    cfg["posterior"] = serde_json::to_value(PosteriorMethod::Mcmc(McmcConfig {
        mode: McmcMode::Batch,
        n_particles: 100,
        burn_in: 20,
        ..Default::default()
    }))
    .unwrap();
    let id = create(&app, cfg).await;
    let (_, q) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
    assert_eq!(q["type"], "attribute");
    assert!(q["prompt"].as_str().unwrap().contains(q["tag"].as_str().unwrap()));
    let restarted = router(AppState::open(dir.path()).unwrap());
    let (_, again) = call(&restarted, "GET", &format!("/sessions/{id}/query"), None).await;
    assert_eq!(q, again);
    let wire: QueryWire = serde_json::from_value(json!({"type": "attribute", "slate": q["slate"].as_array().unwrap().iter().map(|v| v["id"].clone()).collect::<Vec<_>>(), "tag": q["tag"]})).unwrap();
    let (_, snap) = call(&restarted, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(snap["pending_query"]["slate"].as_array().unwrap().len(), wire.slate.len());
    let (status, _) = call(&restarted, "POST", &format!("/sessions/{id}/response"), Some(json!({"direction": -1}))).await;
    assert_eq!(status, StatusCode::OK);
    let _: ResponseWire = serde_json::from_value(json!({"direction": -1})).unwrap();
}
