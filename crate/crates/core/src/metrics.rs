//! Trial metrics, computed only from log records.

use serde::{Deserialize, Serialize};

use crate::log::{EndReason, Event, LogError, Record, TrialLog};
use crate::motion::Mode;
use crate::scenario::Owner;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemRecord {
    pub tick: u64,
    pub gem: u8,
    pub collector: Owner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub ticks: u64,
    /// Simulated seconds until the trial ended.
    pub completion_time: f64,
    pub end_reason: Option<EndReason>,
    pub did_not_finish: bool,
    /// Closest robot-human center distance; absent without a human.
    pub min_separation: Option<f64>,
    pub reroute_count: u64,
    pub revert_count: u64,
    pub wait_count: u64,
    pub wait_time: f64,
    pub battery_trips: u64,
    pub distance_robot: f64,
    pub distance_human: f64,
    pub gems_timeline: Vec<GemRecord>,
    pub rooms_reached: Vec<(u64, usize)>,
    pub stranded: bool,
}

/// Folds records into metrics one at a time, so live sessions and
/// finished logs share the exact same arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAccumulator {
    dt: f64,
    wait_ticks: u64,
    last_human: Option<[f64; 2]>,
    m: TrialMetrics,
}

impl MetricsAccumulator {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            wait_ticks: 0,
            last_human: None,
            m: TrialMetrics {
                ticks: 0,
                completion_time: 0.0,
                end_reason: None,
                did_not_finish: false,
                min_separation: None,
                reroute_count: 0,
                revert_count: 0,
                wait_count: 0,
                wait_time: 0.0,
                battery_trips: 0,
                distance_robot: 0.0,
                distance_human: 0.0,
                gems_timeline: Vec::new(),
                rooms_reached: Vec::new(),
                stranded: false,
            },
        }
    }

    pub fn accept(&mut self, r: &Record) {
        let m = &mut self.m;
        match r {
            Record::Input { .. } => {}
            Record::Snapshot {
                tick,
                human,
                mode,
                translated,
                separation,
                ..
            } => {
                m.ticks = *tick;
                m.completion_time = *tick as f64 * self.dt;
                if *mode == Mode::Waiting {
                    self.wait_ticks += 1;
                    m.wait_time = self.wait_ticks as f64 * self.dt;
                }
                m.distance_robot += translated;
                if let Some(s) = separation {
                    m.min_separation = Some(m.min_separation.map_or(*s, |old| old.min(*s)));
                }
                if let Some(h) = human {
                    if let Some(last) = self.last_human {
                        m.distance_human += (h[0] - last[0]).hypot(h[1] - last[1]);
                    }
                    self.last_human = Some([h[0], h[1]]);
                }
            }
            Record::Event { tick, event } => match event {
                Event::Detour { .. } => m.reroute_count += 1,
                Event::Revert { .. } => m.revert_count += 1,
                Event::Wait { .. } => m.wait_count += 1,
                Event::GoCharge { .. } => m.battery_trips += 1,
                Event::Stranded => m.stranded = true,
                Event::GemCollected { gem, collector } => m.gems_timeline.push(GemRecord {
                    tick: *tick,
                    gem: *gem,
                    collector: *collector,
                }),
                Event::RoomReached { room } => m.rooms_reached.push((*tick, *room)),
                Event::TrialEnd { reason, did_not_finish } => {
                    m.ticks = *tick;
                    m.completion_time = *tick as f64 * self.dt;
                    m.end_reason = Some(*reason);
                    m.did_not_finish = *did_not_finish;
                }
                _ => {}
            },
        }
    }

    pub fn current(&self) -> TrialMetrics {
        self.m.clone()
    }
}

/// Metrics of a finished trial.
pub fn finalize_metrics(log: &TrialLog) -> Result<TrialMetrics, LogError> {
    let records = log.records()?;
    match records.last() {
        Some(Record::Event {
            event: Event::TrialEnd { .. },
            ..
        }) => {}
        _ => return Err(LogError::Unterminated),
    }
    let mut acc = MetricsAccumulator::new(log.header.config.dt);
    for r in &records {
        acc.accept(r);
    }
    Ok(acc.current())
}
