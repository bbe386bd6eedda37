use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use blrhac::adapt::{adapt_episode_seed, agent_seed, run_adaptation_episode, AgentFactory};
use blrhac::nn::{Checkpoint, Family, Model, ModelSpec, TrainingMeta};
use blrhac::population::{sample_population, PopulationConfig};
use blrhac::{EnvironmentSpec, PreferenceMatrix, Split};
use blrhac_service::api::API_SCHEMA;
use blrhac_service::{router, AppState, ServiceConfig};

struct Fixture {
    app: axum::Router,
    leaders: Vec<PreferenceMatrix>,
    _dir: tempfile::TempDir,
}

fn fixture() -> Fixture {
    let env = EnvironmentSpec::small();
    let dir = tempfile::tempdir().unwrap();
    // a shallow prior model whose table is a known nonzero matrix
    let mut model = Model::new(ModelSpec::new(Family::ShallowLinear, env, true), 0).unwrap();
    for t in model.params_mut().tensors_mut() {
        for (i, v) in t.iter_mut().enumerate() {
            *v = (i % 7) as f64 - 3.0;
        }
    }
    Checkpoint {
        model,
        training: TrainingMeta::untrained(0),
    }
    .save(dir.path().join("shallow.json"))
    .unwrap();
    std::fs::write(dir.path().join("junk.json"), "{}").unwrap();

    let pop = sample_population(&PopulationConfig::desk(3), &env).unwrap();
    let leaders = pop.split(Split::Test).to_vec();
    let cfg = ServiceConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        leaders: leaders.clone(),
    };
    Fixture {
        app: router(AppState::new(cfg)),
        leaders,
        _dir: dir,
    }
}

async fn call(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn create(app: &axum::Router, body: Value) -> (String, Value) {
    let (status, v) = call(app, "POST", "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    (v["session_id"].as_str().unwrap().to_string(), v)
}

fn usizes(v: &Value) -> Vec<usize> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as usize)
        .collect()
}

#[tokio::test]
async fn linear_session_starts_from_zero() {
    let f = fixture();
    let (_, v) = create(&f.app, json!({"env": "small", "agent": "linear_scratch"})).await;
    assert_eq!(v["schema"], API_SCHEMA);
    let theta = v["theta"].as_array().unwrap();
    assert_eq!(theta.len(), 5);
    assert!(theta
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .all(|x| x.as_f64() == Some(0.0)));
}

#[tokio::test]
async fn blr_hac_session_carries_bootstrapped_theta() {
    let f = fixture();
    let (_, v) = create(
        &f.app,
        json!({"env": "small", "agent": "blr_hac", "checkpoint": "shallow.json"}),
    )
    .await;
    let row0: Vec<f64> = v["theta"][0]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(row0, vec![-3.0, -2.0, -1.0, 0.0, 1.0]);
}

#[tokio::test]
async fn creation_errors_are_coded() {
    let f = fixture();
    let bad_env = json!({"env": {"num_objects": 3, "num_locations": 3, "name": "small"}, "agent": "linear_scratch"});
    let (s, v) = call(&f.app, "POST", "/v1/sessions", Some(bad_env)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "bad_request");
    let (s, v) = call(
        &f.app,
        "POST",
        "/v1/sessions",
        Some(json!({"env": "small", "agent": "blr_hac", "checkpoint": "nope.json"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "missing_checkpoint");
    let (s, v) = call(
        &f.app,
        "POST",
        "/v1/sessions",
        Some(json!({"env": "small", "agent": "blr_hac"})),
    )
    .await;
    assert_eq!(
        (s, v["error"]["code"].as_str()),
        (StatusCode::NOT_FOUND, Some("missing_checkpoint"))
    );
    let (s, v) = call(
        &f.app,
        "POST",
        "/v1/sessions",
        Some(json!({"env": "medium", "agent": "blr_hac", "checkpoint": "shallow.json"})),
    )
    .await;
    assert_eq!(
        (s, v["error"]["code"].as_str()),
        (StatusCode::BAD_REQUEST, Some("dimension_mismatch"))
    );
    let (s, _) = call(&f.app, "GET", "/v1/sessions/s999/state", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn turn_protocol_over_http() {
    let f = fixture();
    let (id, v) = create(
        &f.app,
        json!({"env": "small", "agent": "linear_scratch", "seed": 5}),
    )
    .await;
    let objects = usizes(&v["state"]["unplaced"]);
    let base = format!("/v1/sessions/{id}");

    let (_, m) = call(&f.app, "GET", &format!("{base}/metrics"), None).await;
    assert_eq!(m["metrics"]["per_episode_accuracy"], json!([]));

    // first turn: disagree on purpose
    let (s, p) = call(
        &f.app,
        "POST",
        &format!("{base}/pick"),
        Some(json!({"object": objects[0]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let dist: f64 = p["proposal"]["distribution"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .sum();
    assert!((dist - 1.0).abs() < 1e-12);
    let (s, e) = call(
        &f.app,
        "POST",
        &format!("{base}/pick"),
        Some(json!({"object": objects[1]})),
    )
    .await;
    assert_eq!(
        (s, e["error"]["code"].as_str()),
        (StatusCode::CONFLICT, Some("out_of_turn"))
    );
    let a_r = p["proposal"]["a_r"].as_u64().unwrap() as usize;
    let a_c = (a_r + 1) % 5;
    let (_, r) = call(
        &f.app,
        "POST",
        &format!("{base}/correct"),
        Some(json!({"location": a_c})),
    )
    .await;
    assert_eq!(r["result"]["agreed"], false);
    assert_eq!(
        r["result"]["theta_delta"],
        json!([
            {"object": objects[0], "location": a_r, "change": -10.0},
            {"object": objects[0], "location": a_c, "change": 10.0}
        ])
    );
    let (s, e) = call(
        &f.app,
        "POST",
        &format!("{base}/correct"),
        Some(json!({"location": 0})),
    )
    .await;
    assert_eq!(
        (s, e["error"]["code"].as_str()),
        (StatusCode::CONFLICT, Some("out_of_turn"))
    );

    // remaining turns: accept; the last pick has one vacant location
    for (t, &o) in objects.iter().enumerate().skip(1) {
        let (_, p) = call(
            &f.app,
            "POST",
            &format!("{base}/pick"),
            Some(json!({"object": o})),
        )
        .await;
        let a_r = p["proposal"]["a_r"].as_u64().unwrap();
        if t == 4 {
            assert_eq!(p["proposal"]["distribution"][a_r as usize], 1.0);
        }
        let (_, r) = call(
            &f.app,
            "POST",
            &format!("{base}/correct"),
            Some(json!({"location": a_r})),
        )
        .await;
        assert_eq!(r["result"]["theta_delta"], json!([]));
        assert_eq!(r["result"]["agreed"], true);
    }
    let (_, st) = call(&f.app, "GET", &format!("{base}/state"), None).await;
    assert_eq!(st["state"]["episode_index"], 1);
    let (_, m) = call(&f.app, "GET", &format!("{base}/metrics"), None).await;
    assert_eq!(m["metrics"]["per_episode_accuracy"], json!([0.8]));
    assert_eq!(m["metrics"]["flops"]["update"], 2 * 25 * 5);
    assert_eq!(m["metrics"]["flops"]["inference"], 25 * 5);
}

#[tokio::test]
async fn malformed_bodies_get_bad_request() {
    let f = fixture();
    let (id, _) = create(&f.app, json!({"env": "small", "agent": "linear_scratch"})).await;
    let (s, v) = call(
        &f.app,
        "POST",
        &format!("/v1/sessions/{id}/pick"),
        Some(json!({"obj": 1})),
    )
    .await;
    assert_eq!(
        (s, v["error"]["code"].as_str()),
        (StatusCode::BAD_REQUEST, Some("bad_request"))
    );
}

#[tokio::test]
async fn scripted_client_reproduces_offline_harness() {
    let f = fixture();
    let env = EnvironmentSpec::small();
    let leader = &f.leaders[2];
    let seed = 21;
    let factory = AgentFactory::LinearScratch { alpha: 10.0 };
    let mut offline = factory.build(&env, agent_seed(seed, 0)).unwrap();
    let out = run_adaptation_episode(
        offline.as_mut(),
        &env,
        leader,
        adapt_episode_seed(seed, 0, 0),
    )
    .unwrap();

    let (id, _) = create(
        &f.app,
        json!({"env": "small", "agent": "linear_scratch", "seed": seed}),
    )
    .await;
    let base = format!("/v1/sessions/{id}");
    for step in &out.episode.steps {
        let (_, p) = call(
            &f.app,
            "POST",
            &format!("{base}/pick"),
            Some(json!({"object": step.a_h})),
        )
        .await;
        assert_eq!(p["proposal"]["a_r"].as_u64().unwrap() as usize, step.a_r);
        let (_, r) = call(
            &f.app,
            "POST",
            &format!("{base}/correct"),
            Some(json!({"location": step.a_c})),
        )
        .await;
        let delta = r["result"]["theta_delta"].as_array().unwrap();
        assert!(delta.len() <= 2);
        for d in delta {
            assert_eq!(d["change"].as_f64().unwrap().abs(), 10.0);
        }
    }
    let (_, m) = call(&f.app, "GET", &format!("{base}/metrics"), None).await;
    let want: Vec<Vec<f64>> = offline
        .theta()
        .unwrap()
        .theta_hat
        .outer_iter()
        .map(|r| r.to_vec())
        .collect();
    assert_eq!(m["metrics"]["theta"], json!(want));
    assert_eq!(m["metrics"]["per_episode_accuracy"], json!([out.accuracy]));
}

#[tokio::test]
async fn simulated_leader_plays_without_exposing_weights() {
    let f = fixture();
    let (id, v) = create(
        &f.app,
        json!({"env": "small", "agent": "linear_scratch", "seed": 2, "simulated_leader": {"preference_index": 0}}),
    )
    .await;
    assert_eq!(v["state"]["simulated_leader"], true);
    let text = v.to_string();
    assert!(!text.contains("theta_true") && !text.contains(&f.leaders[0].preference_id));
    for _ in 0..10 {
        let (s, r) = call(&f.app, "POST", &format!("/v1/sessions/{id}/simulate"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert!(!r.to_string().contains(&f.leaders[0].preference_id));
    }
    let (_, m) = call(&f.app, "GET", &format!("/v1/sessions/{id}/metrics"), None).await;
    assert_eq!(
        m["metrics"]["per_episode_accuracy"]
            .as_array()
            .unwrap()
            .len(),
        2
    );
    let (s, _) = call(&f.app, "POST", "/v1/sessions", Some(json!({"env": "small", "agent": "linear_scratch", "simulated_leader": {"preference_index": 99}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn lists_only_valid_checkpoints() {
    let f = fixture();
    let (s, v) = call(&f.app, "GET", "/v1/checkpoints", None).await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<&str> = v["checkpoints"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, vec!["shallow.json"]);
    assert_eq!(v["checkpoints"][0]["model"]["family"], "shallow_linear");
}

#[tokio::test]
async fn event_stream_opens_with_state_then_follows_turns() {
    let f = fixture();
    let (id, v) = create(&f.app, json!({"env": "small", "agent": "linear_scratch"})).await;
    let req = Request::builder()
        .uri(format!("/v1/sessions/{id}/events"))
        .body(Body::empty())
        .unwrap();
    let resp = f.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();

    async fn next_text(body: &mut Body) -> String {
        loop {
            let frame = body.frame().await.unwrap().unwrap();
            if let Ok(data) = frame.into_data() {
                let s = String::from_utf8(data.to_vec()).unwrap();
                if s.starts_with("event:") {
                    return s;
                }
            }
        }
    }

    let first = next_text(&mut body).await;
    assert!(first.starts_with("event: state\n"), "{first}");

    let o = v["state"]["unplaced"][0].as_u64().unwrap();
    let (_, p) = call(
        &f.app,
        "POST",
        &format!("/v1/sessions/{id}/pick"),
        Some(json!({"object": o})),
    )
    .await;
    assert!(next_text(&mut body).await.starts_with("event: proposal\n"));
    assert!(next_text(&mut body).await.starts_with("event: state\n"));
    call(
        &f.app,
        "POST",
        &format!("/v1/sessions/{id}/correct"),
        Some(json!({"location": p["proposal"]["a_r"]})),
    )
    .await;
    let names: Vec<String> = {
        let mut v = Vec::new();
        for _ in 0..4 {
            let t = next_text(&mut body).await;
            v.push(t.lines().next().unwrap().to_string());
        }
        v
    };
    assert_eq!(
        names,
        vec![
            "event: turn",
            "event: state",
            "event: metrics",
            "event: theta"
        ]
    );
}

#[tokio::test]
async fn distinct_sessions_are_isolated() {
    let f = fixture();
    let app = Arc::new(f.app.clone());
    let (a, _) = create(
        &app,
        json!({"env": "small", "agent": "linear_scratch", "seed": 1}),
    )
    .await;
    let (b, vb) = create(
        &app,
        json!({"env": "small", "agent": "linear_scratch", "seed": 1}),
    )
    .await;
    assert_ne!(a, b);
    let o = vb["state"]["unplaced"][0].as_u64().unwrap();
    call(
        &app,
        "POST",
        &format!("/v1/sessions/{a}/pick"),
        Some(json!({"object": o})),
    )
    .await;
    let (_, sb) = call(&app, "GET", &format!("/v1/sessions/{b}/state"), None).await;
    assert_eq!(sb["state"]["pending"], Value::Null);
}
