use std::net::TcpStream;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use stride_sim::log::{LogRecord, SimulationLog};
use stride_sim::server::{ServeOptions, Server};
use stride_sim::{run_scenario, ScenarioConfig};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    ScenarioConfig::load(path).unwrap()
}

fn next_frame(ws: &mut Client) -> Value {
    loop {
        if let Message::Text(t) = ws.read().unwrap() {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

fn send(ws: &mut Client, msg: Value) {
    ws.send(Message::text(msg.to_string())).unwrap();
}

/// Reads frames until the reply to `seq`, collecting the others.
fn reply(ws: &mut Client, seq: u64, seen: &mut Vec<Value>) -> Value {
    loop {
        let f = next_frame(ws);
        if (f["type"] == "ack" || f["type"] == "error") && f["seq"] == seq {
            return f;
        }
        seen.push(f);
    }
}

#[test]
fn live_session_paces_pauses_and_survives_disconnect() {
    let config = scenario("flat_walk");
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("live.jsonl");
    let options = ServeOptions {
        seed: 9,
        log: Some(log_path.clone()),
        autostart: false,
    };
    let server = Server::start("127.0.0.1:0", Some(config.clone()), options).unwrap();
    let (mut ws, _) = tungstenite::connect(format!("ws://{}", server.local_addr())).unwrap();

    let hello = next_frame(&mut ws);
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["v"], 1);

    let mut frames = Vec::new();
    for (seq, bad) in [
        (1, json!({"v": 1, "seq": 1, "cmd": "fly"})),
        (2, json!({"seq": 2, "cmd": "start"})),
        (3, json!({"v": 1, "seq": 3, "cmd": "relocate", "target": "crate", "pose": [0, 0, 0]})),
        (4, json!({"v": 1, "seq": 4, "cmd": "speed", "factor": -1.0})),
    ] {
        send(&mut ws, bad);
        let r = reply(&mut ws, seq, &mut frames);
        assert_eq!(r["type"], "error", "{r}");
        assert!(r["message"].is_string());
    }
    ws.send(Message::text("not json")).unwrap();
    loop {
        let f = next_frame(&mut ws);
        if f["type"] == "error" {
            assert!(f["seq"].is_null());
            break;
        }
    }

    send(&mut ws, json!({"v": 1, "seq": 5, "cmd": "start"}));
    assert_eq!(reply(&mut ws, 5, &mut frames)["type"], "ack");

    // At least 20 frames per second of wall time while running.
    frames.clear();
    let started = Instant::now();
    while started.elapsed() < Duration::from_millis(500) {
        frames.push(next_frame(&mut ws));
    }
    assert!(frames.len() >= 10, "{} frames in 0.5 s", frames.len());
    assert!(frames.iter().all(|f| f["v"] == 1));

    send(&mut ws, json!({"v": 1, "seq": 6, "cmd": "pause"}));
    assert_eq!(reply(&mut ws, 6, &mut frames)["type"], "ack");
    let status = loop {
        let f = next_frame(&mut ws);
        if f["type"] == "status" {
            break f;
        }
    };
    assert_eq!(status["running"], false);
    let paused_at = status["t"].as_f64().unwrap();
    std::thread::sleep(Duration::from_millis(200));
    let later = loop {
        let f = next_frame(&mut ws);
        if f["type"] == "status" {
            break f;
        }
    };
    assert_eq!(later["t"].as_f64().unwrap(), paused_at);

    send(&mut ws, json!({"v": 1, "seq": 7, "cmd": "speed", "factor": 8.0}));
    assert_eq!(reply(&mut ws, 7, &mut frames)["type"], "ack");
    send(&mut ws, json!({"v": 1, "seq": 8, "cmd": "start"}));
    assert_eq!(reply(&mut ws, 8, &mut frames)["type"], "ack");
    std::thread::sleep(Duration::from_millis(100));
    drop(ws);

    // The run finishes without a client and the log is complete.
    let deadline = Instant::now() + Duration::from_secs(60);
    let log = loop {
        let text = std::fs::read_to_string(&log_path).unwrap_or_default();
        let log = SimulationLog::read_jsonl(text.as_bytes()).ok();
        if let Some(log) = log.filter(|l| {
            l.records
                .iter()
                .any(|r| matches!(r, LogRecord::Event(e) if matches!(e.event, stride_sim::log::Event::End { .. })))
        }) {
            break log;
        }
        assert!(Instant::now() < deadline, "run did not finish");
        std::thread::sleep(Duration::from_millis(50));
    };
    server.shutdown();

    let headless = run_scenario(&config, 9).unwrap();
    assert_eq!(log.to_jsonl(), headless.to_jsonl());
    // Pausing left no hole in the state records.
    let ts: Vec<f64> = log.states().map(|s| s.t).collect();
    assert!(ts.windows(2).all(|w| (w[1] - w[0] - config.gait.dt).abs() < 1e-9));
}

#[test]
fn load_replaces_the_session() {
    let server = Server::start("127.0.0.1:0", None, ServeOptions::default()).unwrap();
    let (mut ws, _) = tungstenite::connect(format!("ws://{}", server.local_addr())).unwrap();
    let mut frames = Vec::new();
    send(&mut ws, json!({"v": 1, "seq": 1, "cmd": "start"}));
    assert_eq!(reply(&mut ws, 1, &mut frames)["type"], "error");
    let config = serde_json::to_value(scenario("flat_walk")).unwrap();
    send(&mut ws, json!({"v": 1, "seq": 2, "cmd": "load", "scenario": config, "seed": 4}));
    assert_eq!(reply(&mut ws, 2, &mut frames)["type"], "ack");
    // The start event and the first plan are streamed before the ack.
    let kinds: Vec<&str> = frames
        .iter()
        .filter(|f| f["type"] == "record")
        .map(|f| f["record"]["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds.first(), Some(&"event"));
    assert!(kinds.contains(&"plan"));
    send(&mut ws, json!({"v": 1, "seq": 3, "cmd": "heading", "heading": [0.0, 1.0]}));
    assert_eq!(reply(&mut ws, 3, &mut frames)["type"], "ack");
    server.shutdown();
}
