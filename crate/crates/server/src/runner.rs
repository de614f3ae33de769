//! Session logic without sockets or clocks: the connection task feeds it
//! client messages and ticks, and sends whatever frames it returns.

use haven_core::config::SimConfig;
use haven_core::engine::{Session, SessionError};
use haven_core::geometry::Vec2;
use haven_core::log::{EndReason, TrialLog};
use haven_core::protocol::{ClientMessage, ServerMessage};

/// Inputs claiming a tick older than this many ticks before the current one
/// are dropped.
pub const STALE_TICKS: u64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation;

pub struct SessionRunner {
    id: String,
    session: Session,
    decimation: u64,
    paused: bool,
}

impl SessionRunner {
    pub fn new(id: impl Into<String>, config: SimConfig, decimation: u64) -> Result<Self, SessionError> {
        Ok(Self {
            id: id.into(),
            session: Session::new(config)?,
            decimation: decimation.max(1),
            paused: true,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn tick_count(&self) -> u64 {
        self.session.tick_count()
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn is_ended(&self) -> bool {
        self.session.is_ended()
    }

    pub fn resume(&mut self) {
        self.paused = false;
    }

    pub fn welcome(&self) -> ServerMessage {
        ServerMessage::welcome(&self.id, &self.session)
    }

    /// Applies one client message. A second Join is a protocol violation.
    pub fn handle(&mut self, msg: ClientMessage) -> Result<Vec<ServerMessage>, Violation> {
        match msg {
            ClientMessage::Join { .. } => Err(Violation),
            ClientMessage::Ping { nonce } => Ok(vec![ServerMessage::Pong { nonce }]),
            ClientMessage::Input { tick, movement } => {
                if self.session.is_ended() {
                    return Ok(Vec::new());
                }
                if tick + STALE_TICKS < self.session.tick_count() {
                    self.session.note_stale(tick);
                } else {
                    self.session.buffer_input(Vec2::new(movement[0], movement[1]));
                    self.paused = false;
                }
                Ok(Vec::new())
            }
        }
    }

    /// Advances one tick unless paused or ended. Returns the tick's events,
    /// a snapshot on decimated ticks, and End once the trial is over.
    pub fn step(&mut self) -> Vec<ServerMessage> {
        if self.paused || self.session.is_ended() {
            return Vec::new();
        }
        self.session.tick();
        let tick = self.session.tick_count();
        let mut out: Vec<ServerMessage> = self
            .session
            .last_events()
            .iter()
            .map(|e| ServerMessage::Event { tick, event: e.clone() })
            .collect();
        if tick.is_multiple_of(self.decimation) || self.session.is_ended() {
            out.push(ServerMessage::snapshot(&self.session));
        }
        if self.session.is_ended() {
            out.push(ServerMessage::end(&self.session));
        }
        out
    }

    /// Ends the trial with `reason` unless it already ended.
    pub fn abort(&mut self, reason: EndReason) -> Option<ServerMessage> {
        if self.session.is_ended() {
            return None;
        }
        self.session.end(reason);
        Some(ServerMessage::end(&self.session))
    }

    pub fn into_log(self) -> TrialLog {
        self.session.into_log()
    }
}
