//! Live API: JSON messages over a websocket. See `docs/protocol.md`.
//!
//! The simulation loop owns the [`Simulation`]; every client connection runs
//! on its own thread and talks to the loop through channels only.

use std::fs::File;
use std::io::{BufWriter, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use crate::config::{EventAction, ScenarioConfig};
use crate::harness::{Finish, Simulation};
use crate::log::LogRecord;

pub const PROTOCOL_VERSION: u32 = 1;

/// Interval between status frames.
const STATUS_PERIOD: Duration = Duration::from_millis(50);
/// Longest stretch the loop simulates before it looks at its inbox again.
const STEP_BUDGET: Duration = Duration::from_millis(20);

/// Inbound commands, tagged by `cmd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Load {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        scenario: Option<Box<ScenarioConfig>>,
        #[serde(default)]
        seed: Option<u64>,
    },
    Start,
    Pause,
    Speed {
        factor: f64,
    },
    Relocate {
        target: String,
        pose: [f64; 3],
    },
    Heading {
        heading: [f64; 2],
    },
}

/// Parses a client message into its optional sequence number and command.
pub fn parse_message(text: &str) -> (Option<u64>, Result<Command, String>) {
    let mut value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return (None, Err(format!("malformed JSON: {e}"))),
    };
    let Some(obj) = value.as_object_mut() else {
        return (None, Err("a message must be a JSON object".into()));
    };
    let seq = obj.remove("seq").and_then(|s| s.as_u64());
    match obj.remove("v").map(|v| v.as_u64()) {
        Some(Some(v)) if v == PROTOCOL_VERSION as u64 => {}
        Some(_) => return (seq, Err(format!("unsupported protocol version, expected {PROTOCOL_VERSION}"))),
        None => return (seq, Err("missing protocol version field `v`".into())),
    }
    (seq, serde_json::from_value(value).map_err(|e| format!("invalid command: {e}")))
}

fn frame(kind: &str, body: Value) -> String {
    let mut v = json!({ "v": PROTOCOL_VERSION, "type": kind });
    if let (Some(dst), Value::Object(src)) = (v.as_object_mut(), body) {
        dst.extend(src);
    }
    v.to_string()
}

fn record_frame(record: &LogRecord) -> String {
    frame("record", json!({ "record": record }))
}

enum Inbound {
    Subscribe(Sender<String>),
    Message { text: String, reply: Sender<String> },
    Shutdown,
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    pub seed: u64,
    /// Log file, rewritten on every load.
    pub log: Option<PathBuf>,
    /// Start running immediately instead of waiting for a start command.
    pub autostart: bool,
}

struct Session {
    sim: Option<Simulation>,
    running: bool,
    speed: f64,
    /// Wall clock and simulation time at the last (re)start of pacing.
    anchor: Option<(Instant, f64)>,
    options: ServeOptions,
    log: Option<BufWriter<File>>,
    clients: Vec<Sender<String>>,
}

impl Session {
    fn broadcast(&mut self, text: String) {
        self.clients.retain(|c| c.send(text.clone()).is_ok());
    }

    fn status(&self) -> String {
        let (t, finished) = match &self.sim {
            Some(sim) => (
                Some(sim.time()),
                sim.finished().map(|f| match f {
                    Finish::Completed => "completed".to_string(),
                    Finish::Halted(r) => format!("halted: {r}"),
                }),
            ),
            None => (None, None),
        };
        frame(
            "status",
            json!({
                "t": t,
                "running": self.running,
                "speed": self.speed,
                "scenario": self.sim.as_ref().map(|s| s.config().name.clone()),
                "finished": finished,
            }),
        )
    }

    fn publish(&mut self, records: Vec<LogRecord>) {
        if let Some(log) = &mut self.log {
            for r in &records {
                if writeln!(log, "{}", r.to_line()).is_err() {
                    break;
                }
            }
            let _ = log.flush();
        }
        for r in &records {
            self.broadcast(record_frame(r));
        }
    }

    fn load(&mut self, config: ScenarioConfig, seed: u64) -> Result<(), String> {
        let mut sim = Simulation::new(config, seed).map_err(|e| e.to_string())?;
        self.log = match &self.options.log {
            Some(path) => Some(BufWriter::new(File::create(path).map_err(|e| format!("{}: {e}", path.display()))?)),
            None => None,
        };
        let records = sim.drain();
        self.sim = Some(sim);
        self.running = false;
        self.anchor = None;
        self.publish(records);
        Ok(())
    }

    fn handle(&mut self, command: Command) -> Result<(), String> {
        match command {
            Command::Load { path, scenario, seed } => {
                let config = match (path, scenario) {
                    (Some(p), None) => ScenarioConfig::load(&p).map_err(|e| e.to_string())?,
                    (None, Some(c)) => *c,
                    _ => return Err("load needs exactly one of `path` and `scenario`".into()),
                };
                self.load(config, seed.unwrap_or(self.options.seed))
            }
            Command::Start => {
                if self.sim.is_none() {
                    return Err("no scenario loaded".into());
                }
                self.running = true;
                self.anchor = None;
                Ok(())
            }
            Command::Pause => {
                self.running = false;
                self.anchor = None;
                Ok(())
            }
            Command::Speed { factor } => {
                if !(factor > 0.0 && factor.is_finite()) {
                    return Err("speed factor must be positive".into());
                }
                self.speed = factor;
                self.anchor = None;
                Ok(())
            }
            Command::Relocate { target, pose } => self.command(EventAction::Relocate { id: target, pose }),
            Command::Heading { heading } => self.command(EventAction::Heading { heading }),
        }
    }

    fn command(&mut self, action: EventAction) -> Result<(), String> {
        let sim = self.sim.as_mut().ok_or("no scenario loaded")?;
        if sim.finished().is_some() {
            return Err("the run has finished".into());
        }
        sim.command(action).map_err(|e| e.to_string())
    }

    /// Simulates up to the paced target time or until the step budget runs
    /// out.
    fn advance(&mut self) {
        let Some(sim) = self.sim.as_mut() else { return };
        if !self.running || sim.finished().is_some() {
            return;
        }
        let (wall0, t0) = *self.anchor.get_or_insert((Instant::now(), sim.time()));
        let target = t0 + wall0.elapsed().as_secs_f64() * self.speed;
        let started = Instant::now();
        let mut records = Vec::new();
        while sim.time() < target && sim.finished().is_none() && started.elapsed() < STEP_BUDGET {
            sim.step();
            records.append(&mut sim.drain());
        }
        if sim.finished().is_some() {
            self.running = false;
        }
        self.publish(records);
    }
}

fn session_loop(mut session: Session, inbox: Receiver<Inbound>) {
    let mut last_status = Instant::now();
    loop {
        let wait = if session.running { Duration::from_millis(2) } else { STATUS_PERIOD };
        match inbox.recv_timeout(wait) {
            Ok(Inbound::Subscribe(client)) => {
                let hello = frame("hello", json!({ "protocol": PROTOCOL_VERSION }));
                if client.send(hello).is_ok() && client.send(session.status()).is_ok() {
                    session.clients.push(client);
                }
            }
            Ok(Inbound::Message { text, reply }) => {
                let (seq, parsed) = parse_message(&text);
                let outcome = parsed.and_then(|c| session.handle(c));
                let answer = match outcome {
                    Ok(()) => frame("ack", json!({ "seq": seq })),
                    Err(message) => frame("error", json!({ "seq": seq, "message": message })),
                };
                let _ = reply.send(answer);
            }
            Ok(Inbound::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
        session.advance();
        if last_status.elapsed() >= STATUS_PERIOD {
            last_status = Instant::now();
            let status = session.status();
            session.broadcast(status);
        }
    }
    if let Some(log) = &mut session.log {
        let _ = log.flush();
    }
}

fn client_loop(mut ws: WebSocket<TcpStream>, outbox: Receiver<String>, inbox: Sender<Inbound>, reply: Sender<String>) {
    loop {
        while let Ok(text) = outbox.try_recv() {
            if ws.send(Message::text(text)).is_err() {
                return;
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                let msg = Inbound::Message {
                    text: text.to_string(),
                    reply: reply.clone(),
                };
                if inbox.send(msg).is_err() {
                    return;
                }
            }
            Ok(Message::Binary(_)) => {
                let error = frame("error", json!({ "seq": null, "message": "binary frames are not supported" }));
                if ws.send(Message::text(error)).is_err() {
                    return;
                }
            }
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                return;
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
    }
}

fn accept_client(stream: TcpStream, inbox: Sender<Inbound>) {
    let _ = stream.set_nodelay(true);
    let Ok(mut ws) = tungstenite::accept(stream) else { return };
    if ws.get_mut().set_read_timeout(Some(Duration::from_millis(5))).is_err() {
        return;
    }
    let (tx, rx) = channel();
    if inbox.send(Inbound::Subscribe(tx.clone())).is_err() {
        return;
    }
    client_loop(ws, rx, inbox, tx);
}

/// A running server: the simulation loop plus the listener thread.
pub struct Server {
    addr: SocketAddr,
    inbox: Sender<Inbound>,
    session: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds `addr` and starts serving, optionally with a scenario loaded.
    pub fn start(addr: &str, initial: Option<ScenarioConfig>, options: ServeOptions) -> Result<Self, String> {
        let listener = TcpListener::bind(addr).map_err(|e| format!("binding {addr}: {e}"))?;
        let local = listener.local_addr().map_err(|e| e.to_string())?;
        let autostart = options.autostart;
        let mut session = Session {
            sim: None,
            running: false,
            speed: 1.0,
            anchor: None,
            options,
            log: None,
            clients: Vec::new(),
        };
        if let Some(config) = initial {
            let seed = session.options.seed;
            session.load(config, seed)?;
            session.running = autostart;
        }
        let (tx, rx) = channel();
        let handle = std::thread::Builder::new()
            .name("simulation".into())
            .spawn(move || session_loop(session, rx))
            .map_err(|e| e.to_string())?;
        let inbox = tx.clone();
        std::thread::Builder::new()
            .name("listener".into())
            .spawn(move || {
                for stream in listener.incoming().flatten() {
                    let inbox = inbox.clone();
                    let _ = std::thread::Builder::new()
                        .name("client".into())
                        .spawn(move || accept_client(stream, inbox));
                }
            })
            .map_err(|e| e.to_string())?;
        Ok(Self {
            addr: local,
            inbox: tx,
            session: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the simulation loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.session.take() {
            let _ = h.join();
        }
    }

    /// Stops the simulation loop and flushes the log.
    pub fn shutdown(mut self) {
        let _ = self.inbox.send(Inbound::Shutdown);
        if let Some(h) = self.session.take() {
            let _ = h.join();
        }
    }
}
