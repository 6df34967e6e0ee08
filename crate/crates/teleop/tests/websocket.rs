use std::time::{Duration, Instant};

use antislosh_core::simulation::{SimConfig, LOG_HEADER};
use antislosh_teleop::{ServeConfig, TeleopServer};
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start(log: Option<std::path::PathBuf>) -> TeleopServer {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let config = ServeConfig {
        session_log: log,
        ..ServeConfig::new(SimConfig::default())
    };
    TeleopServer::start(listener, config).await.unwrap()
}

async fn connect(server: &TeleopServer) -> Client {
    let url = format!("ws://{}/teleop", server.local_addr());
    connect_async(url).await.unwrap().0
}

/// Next JSON frame, or `None` once the socket closes.
async fn next_json(client: &mut Client) -> Option<Value> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), client.next())
            .await
            .expect("server went quiet")?;
        match msg.ok()? {
            Message::Text(text) => return Some(serde_json::from_str(&text).unwrap()),
            Message::Close(_) => return None,
            _ => {}
        }
    }
}

async fn next_of(client: &mut Client, kind: &str) -> Value {
    loop {
        let v = next_json(client).await.expect("socket closed");
        if v["type"] == kind {
            return v;
        }
    }
}

async fn send(client: &mut Client, value: Value) {
    client.send(Message::Text(value.to_string().into())).await.unwrap();
}

fn target(device_x: f64, clutch: bool) -> Value {
    json!({"type": "target", "t": 0.0, "device_x": device_x, "device_z": 0.0, "clutch": clutch})
}

#[tokio::test(flavor = "multi_thread")]
async fn config_first_then_states_at_control_rate() {
    let server = start(None).await;
    let mut client = connect(&server).await;
    let config = next_json(&mut client).await.unwrap();
    assert_eq!(config["type"], "config");
    assert_eq!(config["robot"], json!({"l1": 0.425, "l2": 0.3922, "l3": 0.1}));
    assert_eq!(config["liquid"]["l"], 0.02);
    assert!(config["bounds"]["qdot_max"].is_array());

    let first = next_of(&mut client, "state").await;
    let started = Instant::now();
    let mut last = first.clone();
    for _ in 0..30 {
        last = next_of(&mut client, "state").await;
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!((0.8..1.6).contains(&elapsed), "30 frames took {elapsed} s");
    let dt = last["t"].as_f64().unwrap() - first["t"].as_f64().unwrap();
    assert!((dt - 1.0).abs() < 1e-9, "simulated time advanced {dt}");
    for key in [
        "q",
        "beta",
        "betadot",
        "pose",
        "reference",
        "u",
        "solve_ms",
        "preset",
        "gate",
    ] {
        assert!(!last[key].is_null(), "missing {key}");
    }
    assert_eq!(last["preset"], "P1");
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn second_operator_is_rejected() {
    let server = start(None).await;
    let mut first = connect(&server).await;
    next_of(&mut first, "state").await;

    let mut second = connect(&server).await;
    let reply = next_json(&mut second).await.unwrap();
    assert_eq!(reply["type"], "error");
    assert_eq!(reply["code"], "session_busy");
    assert!(next_json(&mut second).await.is_none());

    // The first session is unaffected.
    next_of(&mut first, "state").await;
    first.close(None).await.unwrap();
    drop(first);

    // Once released, a new operator gets in.
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let mut again = connect(&server).await;
        let v = next_json(&mut again).await.unwrap();
        if v["type"] == "config" {
            break;
        }
        assert!(Instant::now() < deadline, "session slot never released");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_input_gets_an_error_and_the_session_survives() {
    let server = start(None).await;
    let mut client = connect(&server).await;
    next_of(&mut client, "config").await;

    client.send(Message::Text("{not json".into())).await.unwrap();
    let err = next_of(&mut client, "error").await;
    assert_eq!(err["code"], "malformed");

    send(
        &mut client,
        json!({"type": "target", "t": 0.0, "device_x": 0.1, "clutch": true}),
    )
    .await;
    assert_eq!(next_of(&mut client, "error").await["code"], "malformed");

    client.send(Message::Binary(vec![1, 2, 3].into())).await.unwrap();
    assert_eq!(next_of(&mut client, "error").await["code"], "malformed");

    send(&mut client, json!({"type": "set_preset", "name": "P9"})).await;
    assert_eq!(next_of(&mut client, "error").await["code"], "unknown_preset");

    next_of(&mut client, "state").await;
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn set_preset_applies_on_a_later_tick() {
    let server = start(None).await;
    let mut client = connect(&server).await;
    assert_eq!(next_of(&mut client, "state").await["preset"], "P1");
    send(&mut client, json!({"type": "set_preset", "name": "p2"})).await;
    let mut seen = false;
    for _ in 0..30 {
        if next_of(&mut client, "state").await["preset"] == "P2" {
            seen = true;
            break;
        }
    }
    assert!(seen, "preset change never echoed");
    // Sticks afterwards.
    assert_eq!(next_of(&mut client, "state").await["preset"], "P2");
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn drag_moves_the_reference_and_disconnect_brings_the_arm_to_rest() {
    let server = start(None).await;
    let mut client = connect(&server).await;
    let start_pose = next_of(&mut client, "state").await["pose"]["x"].as_f64().unwrap();

    send(&mut client, target(0.0, true)).await;
    for i in 1..=30 {
        send(&mut client, target(0.1 * i as f64 / 30.0, true)).await;
        tokio::time::sleep(Duration::from_millis(15)).await;
    }
    let mut reference = 0.0;
    for _ in 0..30 {
        let s = next_of(&mut client, "state").await;
        reference = s["reference"]["x"].as_f64().unwrap();
    }
    assert!(
        (reference - (start_pose + 0.1)).abs() < 0.01,
        "reference x {reference} after a 0.1 m drag from {start_pose}"
    );

    // Drop the connection mid-motion.
    send(&mut client, target(0.2, true)).await;
    drop(client);
    tokio::time::sleep(Duration::from_secs(3)).await;

    let mut client = connect(&server).await;
    let a = next_of(&mut client, "state").await;
    let mut b = a.clone();
    for _ in 0..10 {
        b = next_of(&mut client, "state").await;
    }
    let moved = (b["pose"]["x"].as_f64().unwrap() - a["pose"]["x"].as_f64().unwrap()).abs();
    assert!(moved < 1e-4, "arm still moving after disconnect: {moved} m in 10 ticks");
    assert!(b["beta"].as_f64().unwrap().abs() < 1e-3);
    let gap = (b["reference"]["x"].as_f64().unwrap() - b["pose"]["x"].as_f64().unwrap()).abs();
    assert!(gap < 1e-3, "reference not at the held pose: gap {gap}");
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn stalled_client_does_not_hold_up_the_loop() {
    let server = start(None).await;
    let mut client = connect(&server).await;
    next_of(&mut client, "state").await;
    let before = server.ticks();
    tokio::time::sleep(Duration::from_secs(1)).await;
    let ticks = server.ticks() - before;
    assert!(
        (24..=36).contains(&ticks),
        "{ticks} ticks in 1 s while the client stalled"
    );
    // Frames keep coming afterwards.
    let t0 = next_of(&mut client, "state").await["t"].as_f64().unwrap();
    let t1 = next_of(&mut client, "state").await["t"].as_f64().unwrap();
    assert!(t1 > t0);
    server.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn shutdown_flushes_the_session_log() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.csv");
    let server = start(Some(path.clone())).await;
    let mut client = connect(&server).await;
    for _ in 0..5 {
        next_of(&mut client, "state").await;
    }
    client.close(None).await.unwrap();
    let summary = server.shutdown().await.unwrap();
    assert!(summary.ticks >= 5);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    assert_eq!(lines.count() as u64, summary.ticks);
}

#[tokio::test(flavor = "multi_thread")]
async fn shutdown_closes_an_open_session() {
    let server = start(None).await;
    let mut client = connect(&server).await;
    next_of(&mut client, "state").await;
    tokio::time::timeout(Duration::from_secs(5), server.shutdown())
        .await
        .expect("shutdown hung on an open session")
        .unwrap();
    while next_json(&mut client).await.is_some() {}
}
