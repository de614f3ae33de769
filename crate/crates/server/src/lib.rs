//! WebSocket session service. Each connection owns one engine instance that
//! advances on a wall-clock timer.

pub mod runner;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{CloseFrame, Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::time::{Instant, MissedTickBehavior};

use haven_core::config::{PolicyConfig, ScenarioKind, SimConfig};
use haven_core::log::EndReason;
use haven_core::protocol::{ClientMessage, ErrorCode, ServerMessage};

pub use runner::SessionRunner;

/// Close code sent after a protocol violation.
pub const POLICY_VIOLATION: u16 = 1008;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub log_dir: PathBuf,
    /// Snapshot every `decimation` ticks.
    pub decimation: u64,
    /// Wall-clock tick period; the scenario's `dt` when unset.
    pub tick_period: Option<Duration>,
    /// A joined session starts on its own after this long without input.
    pub grace: Duration,
    pub max_sessions: usize,
    /// Queued frames may lag the simulation by at most this much simulated time.
    pub backpressure: Duration,
    /// Base configuration per scenario name.
    pub scenarios: BTreeMap<String, SimConfig>,
}

impl ServerConfig {
    pub fn new(log_dir: impl Into<PathBuf>) -> Self {
        let scenarios = [ScenarioKind::Hallway, ScenarioKind::Retrieval, ScenarioKind::Tour]
            .into_iter()
            .map(|k| {
                let mut c = SimConfig::for_scenario(k);
                c.policy = PolicyConfig::Remote;
                (k.name().to_owned(), c)
            })
            .collect();
        Self {
            log_dir: log_dir.into(),
            decimation: 2,
            tick_period: None,
            grace: Duration::from_secs(3),
            max_sessions: 16,
            backpressure: Duration::from_secs(2),
            scenarios,
        }
    }

    /// Log directory from `HAVEN_LOG_DIR`, else `./logs`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os("HAVEN_LOG_DIR").map_or_else(|| PathBuf::from("logs"), PathBuf::from))
    }
}

struct AppState {
    config: ServerConfig,
    active: AtomicUsize,
}

/// Decrements the active-session count when dropped.
struct Slot(Arc<AppState>);

impl Drop for Slot {
    fn drop(&mut self) {
        self.0.active.fetch_sub(1, Ordering::SeqCst);
    }
}

impl AppState {
    fn claim(self: &Arc<Self>) -> Option<Slot> {
        let max = self.config.max_sessions;
        self.active
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < max).then_some(n + 1))
            .ok()
            .map(|_| Slot(self.clone()))
    }
}

pub fn app(config: ServerConfig) -> Router {
    let state = Arc::new(AppState { config, active: AtomicUsize::new(0) });
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/session", get(session))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, config: ServerConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.log_dir)?;
    axum::serve(listener, app(config)).await
}

async fn session(
    ws: WebSocketUpgrade,
    Query(query): Query<HashMap<String, String>>,
    State(state): State<Arc<AppState>>,
) -> Response {
    let seed = match query.get("seed").map(|s| s.parse::<u64>()) {
        None => None,
        Some(Ok(s)) => Some(s),
        Some(Err(_)) => return (StatusCode::BAD_REQUEST, "seed must be an unsigned integer").into_response(),
    };
    ws.on_upgrade(move |socket| connection(socket, state, seed))
}

enum Outbound {
    Frame(u64, String),
    Close(u16, String),
}

enum Inbound {
    Message(ClientMessage),
    Malformed(String),
    Closed,
}

async fn connection(socket: WebSocket, state: Arc<AppState>, query_seed: Option<u64>) {
    let (mut sink, mut stream) = socket.split();
    let sent = Arc::new(AtomicU64::new(0));
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Outbound>();
    let writer_sent = sent.clone();
    let writer = tokio::spawn(async move {
        while let Some(o) = out_rx.recv().await {
            match o {
                Outbound::Frame(tick, text) => {
                    if sink.send(Message::Text(Utf8Bytes::from(text))).await.is_err() {
                        break;
                    }
                    writer_sent.store(tick, Ordering::SeqCst);
                }
                Outbound::Close(code, reason) => {
                    let _ = sink.send(Message::Close(Some(CloseFrame { code, reason: Utf8Bytes::from(reason) }))).await;
                    break;
                }
            }
        }
    });
    let (in_tx, mut in_rx) = mpsc::unbounded_channel::<Inbound>();
    let reader = tokio::spawn(async move {
        while let Some(frame) = stream.next().await {
            let item = match frame {
                Ok(Message::Text(t)) => match ClientMessage::parse(t.as_str()) {
                    Ok(m) => Inbound::Message(m),
                    Err(e) => Inbound::Malformed(e.to_string()),
                },
                Ok(Message::Binary(_)) => Inbound::Malformed("binary frames are not part of the protocol".into()),
                Ok(Message::Ping(_) | Message::Pong(_)) => continue,
                Ok(Message::Close(_)) | Err(_) => break,
            };
            if in_tx.send(item).is_err() {
                return;
            }
        }
        let _ = in_tx.send(Inbound::Closed);
    });

    let send = |m: ServerMessage, tick: u64| {
        let _ = out_tx.send(Outbound::Frame(tick, m.to_text()));
    };
    let violation = |message: String| {
        send(ServerMessage::error(ErrorCode::ProtocolViolation, message.clone()), 0);
        let _ = out_tx.send(Outbound::Close(POLICY_VIOLATION, message));
    };

    let (scenario, join_seed) = match in_rx.recv().await {
        Some(Inbound::Message(ClientMessage::Join { scenario, seed, .. })) => (scenario, seed),
        Some(Inbound::Message(_)) => {
            violation("expected join".into());
            return finish_io(writer, reader, out_tx).await;
        }
        Some(Inbound::Malformed(e)) => {
            violation(e);
            return finish_io(writer, reader, out_tx).await;
        }
        Some(Inbound::Closed) | None => return finish_io(writer, reader, out_tx).await,
    };
    let Some(base) = state.config.scenarios.get(&scenario) else {
        send(ServerMessage::error(ErrorCode::UnknownScenario, format!("no scenario named {scenario:?}")), 0);
        let _ = out_tx.send(Outbound::Close(1000, "unknown scenario".into()));
        return finish_io(writer, reader, out_tx).await;
    };
    let Some(_slot) = state.claim() else {
        send(ServerMessage::error(ErrorCode::CapacityExceeded, "too many active sessions"), 0);
        let _ = out_tx.send(Outbound::Close(1013, "capacity exceeded".into()));
        return finish_io(writer, reader, out_tx).await;
    };
    let mut config = base.clone();
    config.seed = query_seed.or(join_seed).unwrap_or_else(rand::random);
    let id = uuid::Uuid::new_v4().simple().to_string();
    let mut runner = match SessionRunner::new(id, config, state.config.decimation) {
        Ok(r) => r,
        Err(e) => {
            send(ServerMessage::error(ErrorCode::UnknownScenario, e.to_string()), 0);
            let _ = out_tx.send(Outbound::Close(1011, "session setup failed".into()));
            return finish_io(writer, reader, out_tx).await;
        }
    };
    send(runner.welcome(), 0);

    let dt = runner.session().config().dt;
    let period = state.config.tick_period.unwrap_or_else(|| Duration::from_secs_f64(dt));
    let lag_limit = (state.config.backpressure.as_secs_f64() / dt).ceil() as u64;
    let mut timer = tokio::time::interval(period);
    timer.set_missed_tick_behavior(MissedTickBehavior::Burst);
    let grace = tokio::time::sleep_until(Instant::now() + state.config.grace);
    tokio::pin!(grace);
    let mut queued = 0u64;
    let mut close: Option<(u16, String)> = None;

    let reason = loop {
        tokio::select! {
            item = in_rx.recv() => match item {
                Some(Inbound::Message(m)) => match runner.handle(m) {
                    Ok(replies) => {
                        for r in replies {
                            send(r, runner.tick_count());
                        }
                        if !runner.is_paused() {
                            timer.reset();
                        }
                    }
                    Err(_) => {
                        close = Some((POLICY_VIOLATION, "join after session start".into()));
                        break None;
                    }
                },
                Some(Inbound::Malformed(e)) => {
                    close = Some((POLICY_VIOLATION, e));
                    break None;
                }
                Some(Inbound::Closed) | None => break Some(EndReason::Disconnect),
            },
            _ = &mut grace, if runner.is_paused() => {
                runner.resume();
                timer.reset();
            }
            _ = timer.tick(), if !runner.is_paused() => {
                for m in runner.step() {
                    queued = runner.tick_count();
                    send(m, queued);
                }
                if runner.is_ended() {
                    break None;
                }
                if queued.saturating_sub(sent.load(Ordering::SeqCst)) > lag_limit {
                    break Some(EndReason::Backpressure);
                }
            }
        }
    };
    let disconnected = reason == Some(EndReason::Disconnect);
    if let Some((_, message)) = &close {
        send(ServerMessage::error(ErrorCode::ProtocolViolation, message.clone()), runner.tick_count());
    }
    if let Some(end) = runner.abort(reason.unwrap_or(EndReason::Disconnect)) {
        if !disconnected {
            send(end, runner.tick_count());
        }
    }
    let (code, message) = close.unwrap_or((1000, "trial over".into()));
    let _ = out_tx.send(Outbound::Close(code, message));
    let dir = state.config.log_dir.clone();
    let id = runner.id().to_owned();
    let log = runner.into_log();
    match tokio::task::spawn_blocking(move || store::persist(&dir, &id, &log)).await {
        Ok(Ok(path)) => tracing::info!(path = %path.display(), "trial log written"),
        Ok(Err(e)) => tracing::error!(error = %e, "trial log not written"),
        Err(e) => tracing::error!(error = %e, "trial log task failed"),
    }
    finish_io(writer, reader, out_tx).await;
}

/// Lets queued frames drain briefly, then drops the connection.
async fn finish_io(
    writer: tokio::task::JoinHandle<()>,
    reader: tokio::task::JoinHandle<()>,
    out_tx: mpsc::UnboundedSender<Outbound>,
) {
    drop(out_tx);
    let abort = writer.abort_handle();
    if tokio::time::timeout(Duration::from_secs(1), writer).await.is_err() {
        abort.abort();
    }
    reader.abort();
}
