use std::net::SocketAddr;
use std::time::Duration;

use ergodic_imitation::baselines::PlanarTask;
use ergodic_imitation::mpc::{run_closed_loop, MpcConfig};
use ergodic_imitation::pipeline::{synth, SynthRequest};
use ergodic_imitation::task::learn_task;
use ergodic_imitation::{FusionConfig, FusionMode, SystemKind, TaskDefinition};
use ergodic_service::{run, ServiceConfig};
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start() -> String {
    let (tx, rx) = tokio::sync::oneshot::channel::<SocketAddr>();
    let cfg = ServiceConfig {
        port: 0,
        ..ServiceConfig::default()
    };
    tokio::spawn(async move {
        run(cfg, |addr| {
            let _ = tx.send(addr);
        })
        .await
        .unwrap();
    });
    format!("127.0.0.1:{}", rx.await.unwrap().port())
}

async fn post(base: &str, path: &str, body: Value) -> (u16, Value) {
    let r = reqwest::Client::new().post(format!("http://{base}{path}")).json(&body).send().await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap_or(Value::Null))
}

async fn get(base: &str, path: &str) -> (u16, String) {
    let r = reqwest::get(format!("http://{base}{path}")).await.unwrap();
    (r.status().as_u16(), r.text().await.unwrap())
}

async fn session(base: &str, body: Value) -> String {
    let (status, v) = post(base, "/sessions", body).await;
    assert_eq!(status, 201, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn connect(base: &str, id: &str) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{base}/sessions/{id}/live")).await.unwrap();
    ws
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

/// Next message of the given type, skipping others.
async fn next_of(ws: &mut Ws, ty: &str) -> Value {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(30);
    loop {
        let frame = tokio::time::timeout_at(deadline, ws.next()).await.expect("timed out").unwrap().unwrap();
        if let Message::Text(t) = frame {
            let v: Value = serde_json::from_str(&t).unwrap();
            if v["type"] == ty {
                return v;
            }
        }
    }
}

async fn import(base: &str, id: &str, jsonl: String) -> Vec<String> {
    let r = reqwest::Client::new()
        .put(format!("http://{base}/demos?session={id}"))
        .body(jsonl)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let v: Value = r.json().await.unwrap();
    v["imported"].as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn health_reports_version() {
    let base = start().await;
    let (status, body) = get(&base, "/health").await;
    assert_eq!(status, 200);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}

#[tokio::test]
async fn sessions_start_at_rest() {
    let base = start().await;
    let (_, v) = post(&base, "/sessions", json!({"system": "cartpole"})).await;
    assert_eq!(v["x"][0].as_f64().unwrap(), std::f64::consts::PI);
    let (_, v) = post(&base, "/sessions", json!({"system": "planar", "manual_clock": true})).await;
    assert_eq!(v["x"], json!([0.5, 0.5, 0.0, 0.0]));
    let (status, _) = post(&base, "/sessions", json!({"system": "unicycle"})).await;
    assert_eq!(status, 400);
    let (status, _) = get(&base, "/sessions/nope").await;
    assert_eq!(status, 404);
}

#[tokio::test]
async fn wall_clock_ticking_advances_time() {
    let base = start().await;
    let id = session(&base, json!({"system": "cartpole"})).await;
    let mut ws = connect(&base, &id).await;
    let mut last = 0.0;
    for _ in 0..5 {
        last = next_of(&mut ws, "state").await["t"].as_f64().unwrap();
    }
    assert!(last > 0.0);
    // Every tick is exactly one period of simulated time.
    assert!(((last * 50.0).round() - last * 50.0).abs() < 1e-9);
}

#[tokio::test]
async fn live_channel_records_and_rejects_bad_messages() {
    let base = start().await;
    let id = session(&base, json!({"system": "cartpole", "manual_clock": true})).await;
    let mut ws = connect(&base, &id).await;

    send(&mut ws, json!({"type": "control", "u": [1.0, 2.0]})).await;
    assert!(next_of(&mut ws, "error").await["message"].as_str().unwrap().contains("entries"));
    ws.send(Message::Text("{not json".into())).await.unwrap();
    next_of(&mut ws, "error").await;

    send(&mut ws, json!({"type": "start_recording"})).await;
    next_of(&mut ws, "recording_started").await;
    send(&mut ws, json!({"type": "tick", "n": 2})).await;
    send(&mut ws, json!({"type": "stop_recording", "label": "positive"})).await;
    let rec = next_of(&mut ws, "recorded").await;
    assert!(rec["samples"].as_u64().unwrap() >= 2);

    // The wrong-dimension control left the sim untouched.
    let (_, body) = get(&base, &format!("/sessions/{id}")).await;
    let info: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(info["u"], json!([0.0]));
    assert_eq!(info["demos"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn thirty_second_session_sample_count() {
    let base = start().await;
    let id = session(&base, json!({"system": "cartpole", "manual_clock": true})).await;
    let mut ws = connect(&base, &id).await;
    send(&mut ws, json!({"type": "control", "u": [2.0]})).await;
    send(&mut ws, json!({"type": "start_recording"})).await;
    send(&mut ws, json!({"type": "tick", "n": 1500})).await;
    send(&mut ws, json!({"type": "stop_recording", "label": "negative"})).await;
    let rec = next_of(&mut ws, "recorded").await;
    let n = rec["samples"].as_i64().unwrap();
    assert!((n - 1500).abs() <= 1, "{n}");
}

#[tokio::test]
async fn scripted_sessions_are_bit_identical() {
    let base = start().await;
    let mut files = Vec::new();
    for _ in 0..2 {
        let id = session(&base, json!({"system": "planar", "manual_clock": true})).await;
        let mut ws = connect(&base, &id).await;
        send(&mut ws, json!({"type": "start_recording"})).await;
        for i in 0..20 {
            let a = (i as f64 * 0.7).sin();
            send(&mut ws, json!({"type": "control", "u": [a, -a]})).await;
            send(&mut ws, json!({"type": "tick", "n": 3})).await;
        }
        send(&mut ws, json!({"type": "stop_recording", "label": "positive"})).await;
        next_of(&mut ws, "recorded").await;
        let (_, text) = get(&base, &format!("/demos?session={id}")).await;
        // Demo ids embed the session id.
        files.push(text.replace(&id, "S"));
    }
    assert_eq!(files[0], files[1]);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let base = start().await;
    let a = session(&base, json!({"system": "planar", "manual_clock": true})).await;
    let b = session(&base, json!({"system": "planar", "manual_clock": true})).await;
    let mut wa = connect(&base, &a).await;
    let mut wb = connect(&base, &b).await;
    send(&mut wa, json!({"type": "control", "u": [5.0, 0.0]})).await;
    send(&mut wa, json!({"type": "tick", "n": 10})).await;
    loop {
        let t = next_of(&mut wa, "state").await["t"].as_f64().unwrap();
        if (t - 0.2).abs() < 1e-12 {
            break;
        }
    }
    assert_eq!(next_of(&mut wb, "state").await["t"], 0.0);
    let quiet = tokio::time::timeout(Duration::from_millis(200), wb.next()).await;
    assert!(quiet.is_err(), "session b streamed {quiet:?}");
    let (_, body) = get(&base, &format!("/sessions/{b}")).await;
    let info: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(info["x"], json!([0.5, 0.5, 0.0, 0.0]));
    let (_, body) = get(&base, &format!("/sessions/{a}")).await;
    let info: Value = serde_json::from_str(&body).unwrap();
    assert!(info["x"][0].as_f64().unwrap() > 0.5);
}

#[tokio::test]
async fn learn_posonly_single_demo_and_label_errors() {
    let base = start().await;
    let id = session(&base, json!({"system": "cartpole", "manual_clock": true})).await;
    let set = synth(&SynthRequest::cartpole(1, 0, 4)).unwrap();
    let ids = import(&base, &id, set.to_jsonl()).await;

    let (status, v) = post(&base, &format!("/sessions/{id}/learn"), json!({"mode": "posonly"})).await;
    assert_eq!(status, 200, "{v}");
    assert_eq!(v["density"]["values"].as_array().unwrap().len(), 64 * 64);
    let (_, task) = get(&base, &format!("/tasks/{}", v["task_id"].as_str().unwrap())).await;
    let task = TaskDefinition::from_json(&task).unwrap();
    let demo = &set.demos[0];
    let c = demo.trajectory.coefficients(&set.projection, 10, &set.domain).unwrap();
    assert!(task.phi.max_abs_diff(&c).unwrap() < 1e-12);
    assert_eq!(task.provenance[0].id, ids[0]);

    let (status, v) = post(&base, &format!("/sessions/{id}/learn"), json!({"mode": "negonly"})).await;
    assert_eq!(status, 422, "{v}");
    let (status, _) = post(&base, &format!("/sessions/{id}/learn"), json!({"mode": "posonly", "demo_ids": ["x"]})).await;
    assert_eq!(status, 404);

    let (status, body) = get(&base, &format!("/tasks/{}/density?res=16", "task-0")).await;
    assert_eq!(status, 200);
    let grid: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(grid["values"].as_array().unwrap().len(), 256);
}

#[tokio::test]
async fn learn_and_rollout_match_offline_computation() {
    let base = start().await;
    let id = session(&base, json!({"system": "planar", "scenario": "reach", "manual_clock": true})).await;
    let set = synth(&SynthRequest::planar(PlanarTask::Reach, 3, 2, 11)).unwrap();
    import(&base, &id, set.to_jsonl()).await;

    let (status, v) = post(&base, &format!("/sessions/{id}/learn"), json!({"mode": "posneg", "beta": 0.5})).await;
    assert_eq!(status, 200, "{v}");
    let offline = learn_task(&set, FusionMode::Posneg, &FusionConfig::default()).unwrap();
    let grid = offline.density(64, true).unwrap();
    let served: Vec<f64> = v["density"]["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(served, grid.values);
    let task_id = v["task_id"].as_str().unwrap().to_string();
    let (_, task_json) = get(&base, &format!("/tasks/{task_id}")).await;
    assert_eq!(task_json, offline.to_json().unwrap());

    let mut ws = connect(&base, &id).await;
    let x0 = [0.15, 0.3, 0.0, 0.0];
    let (status, summary) = post(
        &base,
        &format!("/sessions/{id}/rollout"),
        json!({"task_id": task_id, "duration": 0.1, "x0": x0, "mpc": {"horizon": 0.5}}),
    )
    .await;
    assert_eq!(status, 200, "{summary}");
    assert_eq!(summary["replans"], 1);
    next_of(&mut ws, "rollout_state").await;
    next_of(&mut ws, "rollout_done").await;

    let mut cfg = MpcConfig::benchmark();
    cfg.horizon = 0.5;
    let local = run_closed_loop(SystemKind::Planar.build(), &offline, &cfg, &x0, 0.1).unwrap();
    let (_, csv) = get(&base, &format!("/sessions/{id}/rollout/last.csv")).await;
    assert_eq!(csv, local.to_csv());
    assert_eq!(summary["final_eps"].as_f64().unwrap(), local.final_eps);
    assert!(summary["metrics"]["collided"].is_boolean());
}

#[tokio::test]
async fn rollout_conflicts_and_cancellation() {
    let base = start().await;
    let id = session(&base, json!({"system": "cartpole", "manual_clock": true})).await;
    import(&base, &id, synth(&SynthRequest::cartpole(1, 0, 2)).unwrap().to_jsonl()).await;
    let (_, v) = post(&base, &format!("/sessions/{id}/learn"), json!({"mode": "posonly"})).await;
    let task_id = v["task_id"].as_str().unwrap().to_string();

    let body = json!({"task_id": task_id, "duration": 120.0, "background": true});
    let (status, _) = post(&base, &format!("/sessions/{id}/rollout"), body.clone()).await;
    assert_eq!(status, 202);
    let (status, _) = post(&base, &format!("/sessions/{id}/rollout"), body).await;
    assert_eq!(status, 409);

    let mut ws = connect(&base, &id).await;
    send(&mut ws, json!({"type": "start_recording"})).await;
    assert!(next_of(&mut ws, "error").await["message"].as_str().unwrap().contains("rollout"));
    next_of(&mut ws, "rollout_state").await;
    let (status, _) = post(&base, &format!("/sessions/{id}/rollout/cancel"), json!({})).await;
    assert_eq!(status, 202);
    let done = next_of(&mut ws, "rollout_done").await;
    let summary = &done["summary"];
    assert_eq!(summary["cancelled"], true);
    assert!(summary["duration"].as_f64().unwrap() < 120.0);

    let (_, body) = get(&base, &format!("/sessions/{id}")).await;
    let info: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(info["rollout_active"], false);
    assert_eq!(info["last_rollout"]["cancelled"], true);
}

#[tokio::test]
async fn expert_task_rollout_succeeds() {
    let base = start().await;
    let id = session(&base, json!({"system": "cartpole", "manual_clock": true})).await;
    import(&base, &id, synth(&SynthRequest::cartpole(3, 0, 0)).unwrap().to_jsonl()).await;
    let (_, v) = post(&base, &format!("/sessions/{id}/learn"), json!({"mode": "posonly"})).await;
    let (status, summary) = post(
        &base,
        &format!("/sessions/{id}/rollout"),
        json!({"task_id": v["task_id"], "duration": 30.0}),
    )
    .await;
    assert_eq!(status, 200, "{summary}");
    assert!(summary["metrics"]["success_time"].as_f64().unwrap() > 0.0, "{summary}");
}
