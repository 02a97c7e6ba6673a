//! Drives the trial server over a real websocket with a scripted client.

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use std::path::Path;
use std::time::Duration;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::time::{timeout, Instant};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use skyguard::demos::{DemoSource, DemoStore};
use skyguard::env::Outcome;
use skyguard::server::{self, ServerOptions};
use skyguard::sim::WorldConfig;

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start(options: ServerOptions) -> std::net::SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(server::serve(listener, options));
    addr
}

struct Client {
    ws: Ws,
    seq: u64,
}

impl Client {
    async fn connect(addr: std::net::SocketAddr) -> Self {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
        Self { ws, seq: 0 }
    }

    async fn send(&mut self, kind: &str, payload: Value) -> u64 {
        self.seq += 1;
        let text = json!({ "type": kind, "seq": self.seq, "payload": payload }).to_string();
        self.ws.send(Message::Text(text)).await.unwrap();
        self.seq
    }

    async fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::Text(text.to_string())).await.unwrap();
    }

    async fn recv(&mut self) -> Value {
        loop {
            let msg =
                timeout(Duration::from_secs(10), self.ws.next()).await.expect("server went quiet").unwrap().unwrap();
            if let Message::Text(t) = msg {
                return serde_json::from_str(&t).unwrap();
            }
        }
    }

    async fn recv_type(&mut self, kind: &str) -> Value {
        loop {
            let v = self.recv().await;
            if v["type"] == kind {
                return v;
            }
        }
    }
}

/// World where the red drone cannot be caught, so episodes only end by
/// timeout or zone entry.
fn long_world() -> WorldConfig {
    WorldConfig { neutralize_range: 1e-3, episode_step_limit: 2000, ..WorldConfig::mini() }
}

/// Red flies a lap around the map edge before heading for the zone.
fn detour() -> Value {
    json!([[580.0, 300.0], [580.0, 580.0], [20.0, 580.0], [20.0, 20.0], [580.0, 20.0], [580.0, 290.0]])
}

async fn configured(addr: std::net::SocketAddr, trial: Value) -> Client {
    let mut c = Client::connect(addr).await;
    c.send("configure", trial).await;
    let ack = c.recv_type("config_ack").await;
    assert_eq!(ack["payload"]["world"]["map_side"], 600.0);
    c
}

#[tokio::test]
async fn health_and_static_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>console</h1>").unwrap();
    let mut options = ServerOptions::new(WorldConfig::mini());
    options.static_dir = Some(dir.path().to_path_buf());
    let addr = start(options).await;

    let get = |path: &'static str| async move {
        let mut s = TcpStream::connect(addr).await.unwrap();
        s.write_all(format!("GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").as_bytes()).await.unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).await.unwrap();
        out
    };
    assert!(get("/health").await.ends_with("ok"));
    let index = get("/").await;
    assert!(index.starts_with("HTTP/1.1 200"), "{index}");
    assert!(index.contains("<h1>console</h1>"));
    assert!(get("/index.html").await.contains("<h1>console</h1>"));
    assert!(get("/missing.js").await.starts_with("HTTP/1.1 404"));
}

#[tokio::test]
async fn protocol_errors_reference_the_offending_message() {
    let addr = start(ServerOptions::new(WorldConfig::mini())).await;
    let mut c = Client::connect(addr).await;
    c.send_raw("{not json").await;
    let e = c.recv_type("error").await;
    assert_eq!(e["payload"]["code"], "bad_message");

    let seq = c.send("pause", Value::Null).await;
    let e = c.recv_type("error").await;
    assert_eq!(e["payload"]["code"], "wrong_phase");
    assert_eq!(e["payload"]["ref_seq"], seq);

    let seq = c.send("set_speed", json!({ "multiplier": 3 })).await;
    let e = c.recv_type("error").await;
    assert_eq!(e["payload"]["code"], "invalid_speed");
    assert_eq!(e["payload"]["ref_seq"], seq);

    c.send("configure", json!({ "update_frequency": -1.0 })).await;
    assert_eq!(c.recv_type("error").await["payload"]["code"], "invalid_config");
}

#[tokio::test]
async fn waypoint_takes_over_the_drone() {
    let mut options = ServerOptions::new(long_world());
    options.tick_wall_seconds = Some(0.02);
    let addr = start(options).await;
    let mut c = configured(addr, json!({ "seed": 4, "red_waypoints": detour(), "agent": { "kind": "random" } })).await;
    c.send("start", Value::Null).await;
    let s = c.recv_type("state_update").await;
    assert_eq!(s["payload"]["blues"][1]["controller"], "agent");

    c.send("add_waypoint", json!({ "drone_id": 1, "x": 100.0, "y": 500.0 })).await;
    let s = loop {
        let s = c.recv_type("state_update").await;
        if s["payload"]["blues"][1]["waypoints"].as_array().is_some_and(|w| !w.is_empty()) {
            break s;
        }
    };
    assert_eq!(s["payload"]["blues"][1]["controller"], "human");
    assert_eq!(s["payload"]["blues"][0]["controller"], "agent");

    // After a few ticks the drone has closed on the waypoint.
    let start_tick = s["payload"]["tick"].as_u64().unwrap();
    let dist = |s: &Value| {
        let b = &s["payload"]["blues"][1];
        ((b["x"].as_f64().unwrap() - 100.0).powi(2) + (b["y"].as_f64().unwrap() - 500.0).powi(2)).sqrt()
    };
    let d0 = dist(&s);
    let later = loop {
        let s = c.recv_type("state_update").await;
        if s["payload"]["tick"].as_u64().unwrap() >= start_tick + 15 {
            break s;
        }
    };
    assert!(dist(&later) < d0 - 50.0, "{} -> {}", d0, dist(&later));

    // Emptying the queue hands the drone back to the agent.
    c.send("delete_waypoint", json!({ "drone_id": 1, "waypoint_index": 0 })).await;
    let s = loop {
        let s = c.recv_type("state_update").await;
        if s["payload"]["blues"][1]["waypoints"].as_array().is_some_and(|w| w.is_empty()) {
            break s;
        }
    };
    assert_eq!(s["payload"]["blues"][1]["controller"], "agent");
}

#[tokio::test]
async fn pause_freezes_the_tick_counter() {
    let mut options = ServerOptions::new(long_world());
    options.tick_wall_seconds = Some(0.01);
    let addr = start(options).await;
    let mut c = configured(addr, json!({ "red_waypoints": detour(), "update_frequency": 1000.0 })).await;
    c.send("start", Value::Null).await;
    loop {
        if c.recv_type("state_update").await["payload"]["tick"].as_u64().unwrap() >= 5 {
            break;
        }
    }
    c.send("pause", Value::Null).await;
    let paused = loop {
        let s = c.recv_type("state_update").await;
        if s["payload"]["phase"] == "paused" {
            break s["payload"]["tick"].as_u64().unwrap();
        }
    };
    tokio::time::sleep(Duration::from_millis(300)).await;
    c.send("set_speed", json!({ "multiplier": 2 })).await;
    let s = c.recv_type("state_update").await;
    assert_eq!(s["payload"]["phase"], "paused");
    assert_eq!(s["payload"]["tick"].as_u64().unwrap(), paused);

    c.send("resume", Value::Null).await;
    loop {
        if c.recv_type("state_update").await["payload"]["tick"].as_u64().unwrap() > paused {
            break;
        }
    }
}

/// Ticks per wall second over a window, measured from broadcast tick counters.
async fn measured_rate(c: &mut Client, window: Duration) -> f64 {
    let first = c.recv_type("state_update").await;
    let (t0, k0) = (Instant::now(), first["payload"]["tick"].as_u64().unwrap());
    loop {
        let s = c.recv_type("state_update").await;
        let elapsed = t0.elapsed();
        if elapsed >= window {
            return (s["payload"]["tick"].as_u64().unwrap() - k0) as f64 / elapsed.as_secs_f64();
        }
    }
}

#[tokio::test]
async fn speed_multiplier_scales_tick_rate() {
    let base = 0.05;
    let mut options = ServerOptions::new(long_world());
    options.tick_wall_seconds = Some(base);
    let addr = start(options).await;
    let mut c = configured(addr, json!({ "red_waypoints": detour(), "update_frequency": 1000.0 })).await;
    c.send("start", Value::Null).await;
    for speed in [1u32, 2, 5] {
        c.send("set_speed", json!({ "multiplier": speed })).await;
        // Let the new period settle before measuring.
        let settle = Instant::now();
        while settle.elapsed() < Duration::from_millis(100) {
            c.recv_type("state_update").await;
        }
        let rate = measured_rate(&mut c, Duration::from_millis(1500)).await;
        let expected = f64::from(speed) / base;
        assert!((rate - expected).abs() <= 0.1 * expected, "speed {speed}: {rate:.1} ticks/s, expected {expected}");
    }
}

async fn run_to_end(addr: std::net::SocketAddr, speed: u32) -> Value {
    let mut c = configured(addr, json!({ "seed": 11, "participant": format!("speed{speed}") })).await;
    c.send("set_speed", json!({ "multiplier": speed })).await;
    c.send("start", Value::Null).await;
    c.recv_type("episode_end").await
}

async fn wait_for_lines(path: &Path, n: usize) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while Instant::now() < deadline {
        if std::fs::read_to_string(path).map_or(0, |t| t.lines().count()) >= n {
            return;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("store never reached {n} lines");
}

#[tokio::test]
async fn physics_does_not_depend_on_speed() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("demos.jsonl");
    let mut options = ServerOptions::new(WorldConfig::mini());
    options.tick_wall_seconds = Some(0.01);
    options.demo_store = Some(store.clone());
    let addr = start(options).await;

    let slow = run_to_end(addr, 1).await;
    let fast = run_to_end(addr, 5).await;
    assert_eq!(slow["payload"]["ticks"], fast["payload"]["ticks"]);
    assert_eq!(slow["payload"]["outcome"], fast["payload"]["outcome"]);
    wait_for_lines(&store, 2).await;

    let demos = DemoStore::open(&store).read_all().unwrap();
    assert_eq!(demos.len(), 2);
    let (a, b) =
        if demos[0].participant.as_deref() == Some("speed1") { (&demos[0], &demos[1]) } else { (&demos[1], &demos[0]) };
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.source, DemoSource::HumanDemo);
}

#[tokio::test]
async fn disconnect_mid_episode_records_a_timeout() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("demos.jsonl");
    let mut options = ServerOptions::new(long_world());
    options.tick_wall_seconds = Some(0.02);
    options.demo_store = Some(store.clone());
    let addr = start(options).await;

    let mut c = configured(addr, json!({ "red_waypoints": detour(), "participant": "p7" })).await;
    c.send("start", Value::Null).await;
    loop {
        if c.recv_type("state_update").await["payload"]["tick"].as_u64().unwrap() >= 3 {
            break;
        }
    }
    c.send("add_waypoint", json!({ "drone_id": 0, "x": 50.0, "y": 50.0 })).await;
    c.recv_type("state_update").await;
    drop(c);

    wait_for_lines(&store, 1).await;
    let demos = DemoStore::open(&store).read_all().unwrap();
    assert_eq!(demos.len(), 1);
    let d = &demos[0];
    assert_eq!(d.outcome, Outcome::Timeout);
    assert_eq!(d.source, DemoSource::HumanDemo);
    assert_eq!(d.participant.as_deref(), Some("p7"));
    assert!(d.ticks >= 3);
    assert_eq!(d.waypoint_events.len(), 1);
    assert!(d.session.is_some());
}

#[tokio::test]
async fn new_episode_after_end_keeps_score() {
    let mut options = ServerOptions::new(WorldConfig::mini());
    options.tick_wall_seconds = Some(0.005);
    let addr = start(options).await;
    let mut c = configured(addr, json!({ "seed": 2 })).await;
    let mut decided = 0;
    for _ in 0..3 {
        c.send("start", Value::Null).await;
        let end = c.recv_type("episode_end").await;
        let score = &end["payload"]["score"];
        if end["payload"]["outcome"] != "timeout" {
            decided += 1;
        }
        assert_eq!(score["wins"].as_u64().unwrap() + score["losses"].as_u64().unwrap(), decided);
    }
}
