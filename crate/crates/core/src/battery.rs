//! Range-based battery with the waypoint and continuous management modes.
//!
//! Charge is measured in meters of remaining travel. Only translation drains.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatteryMode {
    AtWaypointCheck,
    ContinuousMonitor,
    Disabled,
}

impl BatteryMode {
    pub fn code(self) -> u8 {
        match self {
            BatteryMode::AtWaypointCheck => 0,
            BatteryMode::ContinuousMonitor => 1,
            BatteryMode::Disabled => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryParams {
    pub capacity: f64,
    /// Starting range; defaults to full capacity.
    pub initial_range: Option<f64>,
    pub margin: f64,
    pub charge_rate: f64,
    pub dock_radius: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            capacity: 60.0,
            initial_range: None,
            margin: 0.5,
            charge_rate: 6.0,
            dock_radius: 0.3,
        }
    }
}

impl BatteryParams {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return Err("battery capacity must be positive");
        }
        if let Some(r) = self.initial_range {
            if !(0.0..=self.capacity).contains(&r) {
                return Err("battery initial_range must lie in [0, capacity]");
            }
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err("battery margin must be non-negative");
        }
        if !(self.charge_rate > 0.0 && self.charge_rate.is_finite()) {
            return Err("battery charge_rate must be positive");
        }
        if !(self.dock_radius > 0.0 && self.dock_radius.is_finite()) {
            return Err("battery dock_radius must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatteryDecision {
    Proceed,
    GoCharge,
    AbandonAndCharge,
}

/// Outcome of a waypoint check. `a` and `b` are planned path lengths
/// robot to destination and destination to base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaypointCheck {
    pub decision: BatteryDecision,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// No path existed for one of the legs.
    pub stranded_risk: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousCheck {
    pub decision: BatteryDecision,
    pub to_base: Option<f64>,
    pub stranded_risk: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub remaining_range: f64,
    pub capacity: f64,
    pub mode: BatteryMode,
    pub base: Vec2,
    pub charging: bool,
    pub stranded: bool,
}

impl BatteryState {
    pub fn new(params: &BatteryParams, mode: BatteryMode, base: Vec2) -> Self {
        Self {
            remaining_range: params.initial_range.unwrap_or(params.capacity),
            capacity: params.capacity,
            mode,
            base,
            charging: false,
            stranded: false,
        }
    }

    /// A battery that never limits the robot.
    pub fn disabled() -> Self {
        Self::new(&BatteryParams::default(), BatteryMode::Disabled, Vec2::ZERO)
    }

    pub fn enabled(&self) -> bool {
        self.mode != BatteryMode::Disabled
    }

    /// Distance the robot may still translate this tick.
    pub fn range_budget(&self) -> f64 {
        if self.enabled() {
            self.remaining_range
        } else {
            f64::INFINITY
        }
    }

    pub fn fraction(&self) -> f64 {
        self.remaining_range / self.capacity
    }

    pub fn at_base(&self, robot: Vec2, dock_radius: f64) -> bool {
        robot.distance(self.base) <= dock_radius
    }

    /// Removes `translated` meters of range. Returns true when this drain
    /// strands the robot (range reached zero away from the base).
    pub fn drain(&mut self, translated: f64, at_base: bool) -> bool {
        debug_assert!(translated >= 0.0);
        if !self.enabled() || translated <= 0.0 {
            return false;
        }
        self.remaining_range = (self.remaining_range - translated).max(0.0);
        if self.remaining_range == 0.0 && !at_base && !self.stranded {
            self.stranded = true;
            return true;
        }
        false
    }

    /// Decision on arrival at a waypoint before heading to `next_dest`.
    /// `path_len` returns the planned path length between two points.
    pub fn check_at_waypoint(
        &self,
        robot: Vec2,
        next_dest: Vec2,
        mut path_len: impl FnMut(Vec2, Vec2) -> Option<f64>,
    ) -> WaypointCheck {
        let a = path_len(robot, next_dest);
        let b = path_len(next_dest, self.base);
        match (a, b) {
            (Some(a), Some(b)) => WaypointCheck {
                decision: if a + b > self.remaining_range {
                    BatteryDecision::GoCharge
                } else {
                    BatteryDecision::Proceed
                },
                a: Some(a),
                b: Some(b),
                stranded_risk: false,
            },
            _ => WaypointCheck {
                decision: BatteryDecision::Proceed,
                a,
                b,
                stranded_risk: true,
            },
        }
    }

    /// Per-tick check: abandon and return when the remaining range no
    /// longer exceeds the distance to base plus `margin`.
    pub fn check_continuous(
        &self,
        robot: Vec2,
        margin: f64,
        path_len: impl FnOnce(Vec2, Vec2) -> Option<f64>,
    ) -> ContinuousCheck {
        if self.charging {
            return ContinuousCheck {
                decision: BatteryDecision::Proceed,
                to_base: None,
                stranded_risk: false,
            };
        }
        match path_len(robot, self.base) {
            Some(c) => ContinuousCheck {
                decision: if self.remaining_range <= c + margin {
                    BatteryDecision::AbandonAndCharge
                } else {
                    BatteryDecision::Proceed
                },
                to_base: Some(c),
                stranded_risk: false,
            },
            None => ContinuousCheck {
                decision: BatteryDecision::Proceed,
                to_base: None,
                stranded_risk: true,
            },
        }
    }

    /// Recharges while docked. Returns true on the tick the battery is full.
    pub fn charge_tick(&mut self, at_base: bool, charge_rate: f64, dt: f64) -> bool {
        if !at_base {
            return false;
        }
        self.remaining_range = (self.remaining_range + charge_rate * dt).min(self.capacity);
        self.stranded = false;
        self.remaining_range >= self.capacity
    }
}
