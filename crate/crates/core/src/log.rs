//! Line-delimited trial log: a header line followed by tick-stamped input,
//! snapshot and event records.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::battery::BatteryDecision;
use crate::config::{SimConfig, PROTOCOL_VERSION};
use crate::motion::Mode;
use crate::scenario::Owner;
use crate::viz::TurnSignal;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unsupported log version {0:?}")]
    Version(String),
    #[error("log has no trial end record")]
    Unterminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub kind: String,
    pub version: String,
    pub config_hash: String,
    pub map_hash: String,
    pub seed: u64,
    pub config: SimConfig,
    /// Full map text so a log can be replayed without the original file.
    pub map: String,
}

impl LogHeader {
    pub fn new(config: &SimConfig, map_text: &str, map_hash: String) -> Self {
        Self {
            kind: "header".into(),
            version: PROTOCOL_VERSION.into(),
            config_hash: config.hash(),
            map_hash,
            seed: config.seed,
            config: config.clone(),
            map: map_text.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitReason {
    Blocked,
    NoDetour,
    Safety,
    Obstruction,
    Stranded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargeTrigger {
    Waypoint,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetourSource {
    Planner,
    LateralShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Completed,
    Budget,
    Disconnect,
    Backpressure,
    Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    ModeChange { from: Mode, to: Mode },
    Signal { signal: TurnSignal },
    Detour { source: DetourSource, branch_point: f64, rejoin_point: f64 },
    Revert { progress: f64 },
    Wait { reason: WaitReason },
    Resume { reason: WaitReason },
    BatteryCheck { a: Option<f64>, b: Option<f64>, remaining: f64, decision: BatteryDecision },
    GoCharge { trigger: ChargeTrigger, remaining: f64 },
    StrandedRisk,
    Stranded,
    ChargingStarted,
    ChargeComplete,
    GemCollected { gem: u8, collector: Owner },
    GemUnreachable { gem: u8 },
    ObstructionRemoved { index: usize },
    RoomReached { room: usize },
    GoalReached,
    StaleInput { claimed_tick: u64 },
    Fault { message: String },
    TrialEnd { reason: EndReason, did_not_finish: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Input {
        tick: u64,
        #[serde(rename = "move")]
        movement: [f64; 2],
    },
    Snapshot {
        tick: u64,
        hash: String,
        robot: [f64; 3],
        human: Option<[f64; 3]>,
        mode: Mode,
        battery: f64,
        translated: f64,
        separation: Option<f64>,
        blocked: bool,
    },
    Event { tick: u64, event: Event },
}

impl Record {
    pub fn tick(&self) -> u64 {
        match self {
            Record::Input { tick, .. } | Record::Snapshot { tick, .. } | Record::Event { tick, .. } => *tick,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// An append-only trial log. Records are kept in their serialized form so
/// that replay compares exactly what was written.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    pub header: LogHeader,
    pub lines: Vec<String>,
}

impl TrialLog {
    pub fn new(header: LogHeader) -> Self {
        Self { header, lines: Vec::new() }
    }

    pub fn push(&mut self, record: &Record) {
        self.lines.push(record.to_line());
    }

    pub fn header_line(&self) -> String {
        serde_json::to_string(&self.header).expect("header serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    /// Hex sha256 of the full text.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.header_line().as_bytes());
        h.update(b"\n");
        for l in &self.lines {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    pub fn parse(text: &str) -> Result<Self, LogError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(LogError::Empty)?;
        let header: LogHeader = serde_json::from_str(first).map_err(|e| LogError::Malformed {
            line: 1,
            message: e.to_string(),
        })?;
        if header.kind != "header" {
            return Err(LogError::Malformed {
                line: 1,
                message: "first line is not a header".into(),
            });
        }
        if header.version != PROTOCOL_VERSION {
            return Err(LogError::Version(header.version));
        }
        Ok(Self {
            header,
            lines: lines.map(|(_, l)| l.to_owned()).collect(),
        })
    }

    /// Decodes every record, checking that ticks never decrease.
    pub fn records(&self) -> Result<Vec<Record>, LogError> {
        let mut out = Vec::with_capacity(self.lines.len());
        let mut last = 0;
        for (i, l) in self.lines.iter().enumerate() {
            let r: Record = serde_json::from_str(l).map_err(|e| LogError::Malformed {
                line: i + 2,
                message: e.to_string(),
            })?;
            if r.tick() < last {
                return Err(LogError::Malformed {
                    line: i + 2,
                    message: format!("tick {} after tick {last}", r.tick()),
                });
            }
            last = r.tick();
            out.push(r);
        }
        Ok(out)
    }

    /// The trial end record, if the trial is over.
    pub fn end(&self) -> Option<(u64, EndReason)> {
        let l = self.lines.last()?;
        match serde_json::from_str::<Record>(l).ok()? {
            Record::Event {
                tick,
                event: Event::TrialEnd { reason, .. },
            } => Some((tick, reason)),
            _ => None,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioKind;

    #[test]
    fn record_shapes() {
        let r = Record::Input { tick: 4, movement: [1.0, 0.0] };
        assert_eq!(r.to_line(), r#"{"kind":"input","tick":4,"move":[1.0,0.0]}"#);
        let e = Record::Event {
            tick: 9,
            event: Event::Wait { reason: WaitReason::Blocked },
        };
        assert_eq!(e.to_line(), r#"{"kind":"event","tick":9,"event":{"type":"wait","reason":"blocked"}}"#);
        let back: Record = serde_json::from_str(&e.to_line()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn text_round_trip() {
        let cfg = SimConfig::for_scenario(ScenarioKind::Retrieval);
        let mut log = TrialLog::new(LogHeader::new(&cfg, "map", "abc".into()));
        log.push(&Record::Input { tick: 1, movement: [0.5, -0.25] });
        log.push(&Record::Event {
            tick: 2,
            event: Event::TrialEnd {
                reason: EndReason::Budget,
                did_not_finish: true,
            },
        });
        let back = TrialLog::parse(&log.to_text()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.digest(), log.digest());
        assert_eq!(back.end(), Some((2, EndReason::Budget)));
        assert_eq!(back.records().unwrap().len(), 2);
    }

    #[test]
    fn rejects_bad_logs() {
        assert!(matches!(TrialLog::parse(""), Err(LogError::Empty)));
        assert!(matches!(TrialLog::parse("{}"), Err(LogError::Malformed { line: 1, .. })));
        let cfg = SimConfig::for_scenario(ScenarioKind::Hallway);
        let mut log = TrialLog::new(LogHeader::new(&cfg, "m", "h".into()));
        log.lines.push(r#"{"kind":"input","tick":5,"move":[0.0,0.0]}"#.into());
        log.lines.push(r#"{"kind":"input","tick":3,"move":[0.0,0.0]}"#.into());
        assert!(matches!(log.records(), Err(LogError::Malformed { line: 3, .. })));
        log.lines.push("garbage".into());
        let back = TrialLog::parse(&log.to_text()).unwrap();
        assert!(back.records().is_err());
    }
}
