//! The robot's visible intent: path markers, turn signal, thought bubble and
//! battery indicator, derived from simulation state every tick.

use serde::{Deserialize, Serialize};

use crate::battery::BatteryState;
use crate::geometry::{Primitive, Vec2, DEGENERATE_DISTANCE};
use crate::motion::{Mode, MotionParams, RobotState};
use crate::planner::PathPlan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VizParams {
    pub spacing: f64,
    pub steps_to_project: usize,
    pub bubble_radius: f64,
}

impl Default for VizParams {
    fn default() -> Self {
        Self {
            spacing: 0.25,
            steps_to_project: 12,
            bubble_radius: 3.0,
        }
    }
}

impl VizParams {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err("viz spacing must be positive");
        }
        if !(self.bubble_radius >= 0.0 && self.bubble_radius.is_finite()) {
            return Err("viz bubble_radius must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    Linear,
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathMarker {
    pub position: Vec2,
    pub kind: MarkerKind,
    pub dimmed: bool,
    pub index: usize,
    /// Arclength along the source plan.
    pub s: f64,
    /// Index of the source primitive in the plan.
    pub primitive: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnSignal {
    None,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtBubble {
    pub visible: bool,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryIndicator {
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizState {
    /// Active plan projection followed by the dimmed original, if any.
    pub markers: Vec<PathMarker>,
    pub signal: TurnSignal,
    pub bubble: ThoughtBubble,
    pub battery: BatteryIndicator,
}

impl VizState {
    pub fn active_markers(&self) -> impl Iterator<Item = &PathMarker> {
        self.markers.iter().filter(|m| !m.dimmed)
    }
}

/// Markers every `spacing` meters ahead of `progress` plus the plan end,
/// keeping the first `steps_to_project`.
pub fn project_path(plan: &PathPlan, progress: f64, spacing: f64, steps_to_project: usize) -> Vec<PathMarker> {
    let total = plan.total_length();
    let mut out = Vec::new();
    if plan.is_empty() || steps_to_project == 0 || progress >= total {
        return out;
    }
    let push = |s: f64, out: &mut Vec<PathMarker>| {
        let Some(i) = plan.locate(s) else { return };
        let prim = &plan.primitives()[i];
        let local = (s - plan.offset(i)).clamp(0.0, prim.length());
        let Ok(position) = crate::geometry::sample_primitive(prim, local) else { return };
        let kind = match prim {
            Primitive::Arc(_) => MarkerKind::Arc,
            _ => MarkerKind::Linear,
        };
        out.push(PathMarker {
            position,
            kind,
            dimmed: false,
            index: out.len(),
            s,
            primitive: i,
        });
    };
    let mut k = 1usize;
    while out.len() < steps_to_project {
        let s = progress + k as f64 * spacing;
        if s >= total - DEGENERATE_DISTANCE {
            push(total, &mut out);
            break;
        }
        push(s, &mut out);
        k += 1;
    }
    out
}

/// The robot's projection and, during a detour, the dimmed original.
pub fn project_robot(robot: &RobotState, params: &VizParams) -> Vec<PathMarker> {
    let mut markers = project_path(robot.plan(), robot.plan_progress(), params.spacing, params.steps_to_project);
    if let (Some(ctx), Some(s)) = (robot.detour(), robot.original_progress()) {
        markers.extend(
            project_path(&ctx.original, s, params.spacing, params.steps_to_project)
                .into_iter()
                .map(|m| PathMarker { dimmed: true, ..m }),
        );
    }
    markers
}

pub fn turn_signal(robot: &RobotState, epsilon: f64) -> TurnSignal {
    if !matches!(robot.mode, Mode::RotateInPlace | Mode::ArcPursuit) {
        return TurnSignal::None;
    }
    match robot.target_geometry() {
        Some((alpha, _)) if alpha > epsilon => TurnSignal::Left,
        Some((alpha, _)) if alpha < -epsilon => TurnSignal::Right,
        _ => TurnSignal::None,
    }
}

pub fn thought_bubble(robot: Vec2, human: Option<Vec2>, message: &str, radius: f64) -> ThoughtBubble {
    ThoughtBubble {
        visible: human.is_some_and(|h| h.distance(robot) < radius),
        message: message.to_owned(),
    }
}

pub fn battery_indicator(batt: &BatteryState) -> BatteryIndicator {
    BatteryIndicator {
        fraction: batt.fraction(),
    }
}

pub fn compute(
    robot: &RobotState,
    human: Option<Vec2>,
    message: &str,
    params: &VizParams,
    motion: &MotionParams,
) -> VizState {
    VizState {
        markers: project_robot(robot, params),
        signal: turn_signal(robot, motion.signal_epsilon),
        bubble: thought_bubble(robot.pose.position(), human, message, params.bubble_radius),
        battery: battery_indicator(&robot.battery),
    }
}
