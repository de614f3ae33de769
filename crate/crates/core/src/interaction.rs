//! Human avatar kinematics and the response to a human standing on the
//! robot's projected path: continue, detour, wait, revert or resume.

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose2D, Vec2};
use crate::motion::RobotState;
use crate::planner::NavGrid;
use crate::viz::PathMarker;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionParams {
    pub block_radius: f64,
    pub wait_distance: f64,
    pub latch_ticks: u64,
    /// Radius of the disc injected around the human when planning a detour.
    pub detour_radius: f64,
    pub robot_radius: f64,
    pub human_radius: f64,
    pub human_speed: f64,
}

impl Default for InteractionParams {
    fn default() -> Self {
        Self {
            block_radius: 0.6,
            wait_distance: 1.0,
            latch_ticks: 25,
            detour_radius: 0.75,
            robot_radius: 0.25,
            human_radius: 0.3,
            human_speed: 1.2,
        }
    }
}

impl InteractionParams {
    pub fn validate(&self) -> Result<(), &'static str> {
        let all = [
            self.block_radius,
            self.wait_distance,
            self.detour_radius,
            self.robot_radius,
            self.human_radius,
            self.human_speed,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err("interaction distances and speeds must be positive");
        }
        if self.detour_radius < self.robot_radius + self.human_radius {
            return Err("detour_radius must cover both footprints");
        }
        Ok(())
    }

    /// Closest allowed center distance between robot and human.
    pub fn footprint_distance(&self) -> f64 {
        self.robot_radius + self.human_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanState {
    pub pose: Pose2D,
    pub radius: f64,
    pub speed: f64,
    pub input: Vec2,
}

impl HumanState {
    pub fn new(pose: Pose2D, params: &InteractionParams) -> Self {
        Self {
            pose,
            radius: params.human_radius,
            speed: params.human_speed,
            input: Vec2::ZERO,
        }
    }

    pub fn set_input(&mut self, input: Vec2) {
        self.input = input.clamp_unit();
    }

    /// Holonomic move with axis-separated wall sliding on `grid`, which is
    /// expected to be inflated by the human radius.
    pub fn step(&mut self, grid: &NavGrid, dt: f64) {
        let delta = self.input.clamp_unit() * (self.speed * dt);
        if delta.norm() == 0.0 {
            return;
        }
        let start = self.pose.position();
        let after_x = slide(grid, start, Vec2::new(delta.x, 0.0));
        let end = slide(grid, after_x, Vec2::new(0.0, delta.y));
        self.pose.set_position(end);
        self.pose.set_heading(delta.angle());
    }
}

/// Furthest point along `from + t·delta`, t in [0, 1], reachable without
/// touching a blocked cell. A start inside a blocked cell moves freely so a
/// badly placed avatar can walk out.
fn slide(grid: &NavGrid, from: Vec2, delta: Vec2) -> Vec2 {
    if delta.norm() == 0.0 {
        return from;
    }
    let full = from + delta;
    if grid.point_blocked(from) || grid.segment_clear(from, full) {
        return full;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if grid.segment_clear(from, from + delta * mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    from + delta * lo
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAssessment {
    pub blocked: bool,
    pub near_robot: bool,
    pub near_destination: bool,
    pub first_blocked_marker: Option<usize>,
}

impl BlockAssessment {
    pub fn near(&self) -> bool {
        self.near_robot || self.near_destination
    }
}

pub fn assess_block<'a>(
    markers: impl IntoIterator<Item = &'a PathMarker>,
    robot: Vec2,
    goal: Vec2,
    human: Vec2,
    params: &InteractionParams,
) -> BlockAssessment {
    let first_blocked_marker = markers
        .into_iter()
        .find(|m| m.position.distance(human) < params.block_radius)
        .map(|m| m.index);
    BlockAssessment {
        blocked: first_blocked_marker.is_some(),
        near_robot: human.distance(robot) < params.wait_distance,
        near_destination: human.distance(goal) < params.wait_distance,
        first_blocked_marker,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Continue,
    Detour,
    Wait,
    Revert,
    Resume,
}

/// Decision latch shared by Detour and Revert to keep them from flapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Arbiter {
    latched_until: u64,
    waiting: bool,
}

impl Arbiter {
    pub fn waiting(&self) -> bool {
        self.waiting
    }

    pub fn latched(&self, tick: u64) -> bool {
        tick < self.latched_until
    }

    pub fn latched_until(&self) -> u64 {
        self.latched_until
    }

    /// Decides this tick's response. `active` assesses the plan being
    /// followed; `original` assesses the retained plan during a detour.
    pub fn arbitrate(
        &self,
        tick: u64,
        active: &BlockAssessment,
        original: Option<&BlockAssessment>,
        robot: &RobotState,
    ) -> Action {
        let latched = self.latched(tick);
        if self.waiting {
            return if !active.blocked {
                Action::Resume
            } else if !active.near() && !latched {
                Action::Detour
            } else {
                Action::Wait
            };
        }
        if let (Some(ctx), Some(orig), Some(s)) = (robot.detour(), original, robot.original_progress()) {
            if !orig.blocked && s < ctx.branch_point && !latched {
                return Action::Revert;
            }
        }
        if !active.blocked {
            return Action::Continue;
        }
        if active.near() || robot.detour().is_some() || latched {
            Action::Wait
        } else {
            Action::Detour
        }
    }

    /// Records the action the engine actually carried out.
    pub fn commit(&mut self, tick: u64, action: Action, latch_ticks: u64) {
        match action {
            Action::Detour | Action::Revert => {
                self.latched_until = tick + latch_ticks;
                self.waiting = false;
            }
            Action::Wait => self.waiting = true,
            Action::Resume => self.waiting = false,
            Action::Continue => {}
        }
    }
}

/// Translation guard: the robot must not drive into the human's footprint,
/// nor advance on a human inside `wait_distance` who sits in its swept
/// corridor.
pub fn translation_unsafe(
    robot: &Pose2D,
    step: f64,
    human: Vec2,
    params: &InteractionParams,
) -> bool {
    let p = robot.position();
    let next = p + robot.direction() * step;
    if segment_distance(p, next, human) < params.footprint_distance() {
        return true;
    }
    let rel = human - p;
    if rel.norm() >= params.wait_distance {
        return false;
    }
    let ahead = rel.dot(robot.direction());
    let lateral = rel.cross(robot.direction()).abs();
    ahead > 0.0 && lateral < params.footprint_distance()
}

fn segment_distance(a: Vec2, b: Vec2, p: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return a.distance(p);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    (a + ab * t).distance(p)
}
