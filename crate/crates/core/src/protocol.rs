//! Wire messages of the "haven/1" session protocol. Every frame is one JSON
//! object tagged by `kind`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SimConfig;
use crate::engine::Session;
use crate::geometry::Vec2;
use crate::log::{EndReason, Event};
use crate::metrics::TrialMetrics;
use crate::motion::Mode;
use crate::planner::MapFile;
use crate::scenario::Gem;
use crate::viz::VizState;

pub const PROTOCOL: &str = "haven/1";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("move vector must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientMessage {
    Join {
        scenario: String,
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
    },
    Input {
        tick: u64,
        #[serde(rename = "move")]
        movement: [f64; 2],
    },
    Ping {
        nonce: u64,
    },
}

impl ClientMessage {
    /// Parses one frame. Unknown fields are ignored and unknown kinds are
    /// rejected.
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let msg: Self = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if let Self::Input { movement, .. } = &msg {
            if !movement.iter().all(|v| v.is_finite()) {
                return Err(ProtocolError::NonFinite);
            }
        }
        Ok(msg)
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("client messages serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownScenario,
    CapacityExceeded,
    ProtocolViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEcho {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    /// Map rows as in the map file, top row first.
    pub rows: Vec<String>,
    pub digest: String,
}

impl MapEcho {
    pub fn new(map: &MapFile) -> Self {
        Self {
            width: map.width,
            height: map.height,
            resolution: map.resolution,
            rows: map.rows(),
            digest: map.digest(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotView {
    /// `[x, y, heading]`.
    pub pose: [f64; 3],
    pub mode: Mode,
    pub battery: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanView {
    pub pose: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFrame {
    pub tick: u64,
    pub hash: String,
    pub robot: RobotView,
    pub human: Option<HumanView>,
    pub viz: VizState,
    pub gems: Vec<Gem>,
    pub base: Option<Vec2>,
    pub metrics: TrialMetrics,
}

impl SnapshotFrame {
    pub fn of(session: &Session) -> Self {
        let s = session.state();
        let r = &s.robot;
        Self {
            tick: session.tick_count(),
            hash: format!("{:016x}", session.state_hash()),
            robot: RobotView {
                pose: [r.pose.x, r.pose.y, r.pose.heading()],
                mode: s.mode,
                battery: r.battery.fraction(),
            },
            human: s.human.as_ref().map(|h| HumanView {
                pose: [h.pose.x, h.pose.y, h.pose.heading()],
            }),
            viz: session.viz().clone(),
            gems: session.gems().to_vec(),
            base: session.map().base,
            metrics: session.metrics(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Welcome {
        session_id: String,
        protocol: String,
        config: Box<SimConfig>,
        map: MapEcho,
    },
    Snapshot(Box<SnapshotFrame>),
    Event {
        tick: u64,
        event: Event,
    },
    End {
        tick: u64,
        reason: EndReason,
        metrics: Box<TrialMetrics>,
    },
    Pong {
        nonce: u64,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn welcome(session_id: &str, session: &Session) -> Self {
        Self::Welcome {
            session_id: session_id.to_owned(),
            protocol: PROTOCOL.to_owned(),
            config: Box::new(session.config().clone()),
            map: MapEcho::new(session.map()),
        }
    }

    pub fn snapshot(session: &Session) -> Self {
        Self::Snapshot(Box::new(SnapshotFrame::of(session)))
    }

    pub fn end(session: &Session) -> Self {
        Self::End {
            tick: session.tick_count(),
            reason: session.end_reason().unwrap_or(EndReason::Disconnect),
            metrics: Box::new(session.metrics()),
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Self::Error { code, message: message.into() }
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
