//! Occupancy-grid planning that produces typed primitive plans.
//!
//! A* on the 8-connected inflated grid, greedy string pulling of the cell
//! path, then each junction is turned into `Rotate`/`Line`/`Arc` primitives
//! using the same threshold rule the controller applies.

mod astar;
mod grid;
pub mod map;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    signed_angle_to, wrap_angle, ArcPrimitive, LinePrimitive, Pose2D, Primitive, RotatePrimitive,
    Vec2, DEGENERATE_DISTANCE,
};

pub use astar::{astar, distance_field, successors, GridCost, NEIGHBOURS};
pub use grid::{DynamicObstacle, NavGrid};
pub use map::{MapError, MapFile};

/// Below this misalignment a leg is emitted as a straight line.
const STRAIGHT_ANGLE: f64 = 1e-3;
/// Rotations smaller than this are dropped.
const NEGLIGIBLE_ROTATION: f64 = 1e-12;
/// Detour and original plan are considered coincident within this distance.
pub const DIVERGENCE_TOLERANCE: f64 = 0.15;
/// How far (meters) a blocked start may be moved to reach a free cell.
const MAX_ESCAPE: f64 = 1.0;
/// Sampling step used for plan/obstacle distance checks.
pub const SAMPLE_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("start position is blocked")]
    StartBlocked,
    #[error("goal position is blocked")]
    GoalBlocked,
    #[error("no path to goal")]
    NoPath,
    #[error("leg {index}: {source}")]
    Leg {
        index: usize,
        #[source]
        source: Box<PlanError>,
    },
    #[error("no detour around the obstacle exists")]
    NoDetour,
    #[error("plan is discontinuous at primitive {index} (gap {gap:.3e})")]
    Discontinuous { index: usize, gap: f64 },
}

/// Controller threshold rule, shared so plans match what the robot will do.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JunctionRule {
    pub angle_threshold: f64,
    pub near_distance: f64,
}

impl Default for JunctionRule {
    fn default() -> Self {
        Self {
            angle_threshold: std::f64::consts::FRAC_PI_3,
            near_distance: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlanOptions {
    pub rule: JunctionRule,
    /// Accept a start inside an inflated cell and escape to the nearest free
    /// cell. Used when replanning from the robot's actual pose.
    pub relax_start: bool,
}

impl PlanOptions {
    pub fn relaxed(rule: JunctionRule) -> Self {
        Self { rule, relax_start: true }
    }
}

/// Ordered primitives from planner to controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPlan {
    primitives: Vec<Primitive>,
    offsets: Vec<f64>,
    total_length: f64,
    goal: Vec2,
}

impl PathPlan {
    pub fn empty(goal: Vec2) -> Self {
        Self {
            primitives: Vec::new(),
            offsets: Vec::new(),
            total_length: 0.0,
            goal,
        }
    }

    pub fn from_primitives(primitives: Vec<Primitive>, goal: Vec2) -> Self {
        let mut offsets = Vec::with_capacity(primitives.len());
        let mut total = 0.0;
        for p in &primitives {
            offsets.push(total);
            total += p.length();
        }
        Self {
            primitives,
            offsets,
            total_length: total,
            goal,
        }
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn goal(&self) -> Vec2 {
        self.goal
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Arclength at which primitive `i` starts.
    pub fn offset(&self, i: usize) -> f64 {
        self.offsets[i]
    }

    pub fn end_offset(&self, i: usize) -> f64 {
        self.offsets[i] + self.primitives[i].length()
    }

    pub fn start_point(&self) -> Option<Vec2> {
        self.primitives.first().map(Primitive::start_point)
    }

    /// Index of the translational primitive containing arclength `s`; a
    /// boundary belongs to the later primitive, the plan end to the last.
    pub fn locate(&self, s: f64) -> Option<usize> {
        let mut last = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if !p.is_translation() {
                continue;
            }
            if s < self.end_offset(i) {
                return Some(i);
            }
            last = Some(i);
        }
        last
    }

    pub fn point_at(&self, s: f64) -> Option<Vec2> {
        let i = self.locate(s)?;
        let local = (s - self.offsets[i]).clamp(0.0, self.primitives[i].length());
        crate::geometry::sample_primitive(&self.primitives[i], local).ok()
    }

    /// Points every `step` meters from arclength `from` to the end, plus the
    /// exact end point.
    pub fn samples_from(&self, from: f64, step: f64) -> Vec<Vec2> {
        let mut out = Vec::new();
        if self.is_empty() {
            return out;
        }
        let mut k = 0usize;
        loop {
            let s = from + k as f64 * step;
            if s >= self.total_length {
                break;
            }
            out.extend(self.point_at(s));
            k += 1;
        }
        out.extend(self.point_at(self.total_length));
        out
    }

    pub fn distance_to(&self, p: Vec2) -> f64 {
        self.primitives
            .iter()
            .map(|prim| prim.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest position or heading jump between consecutive primitives.
    pub fn check_continuity(&self, tolerance: f64) -> Result<(), PlanError> {
        for (i, pair) in self.primitives.windows(2).enumerate() {
            let gap_pos = pair[0].end_point().distance(pair[1].start_point());
            let gap_heading = wrap_angle(pair[0].end_heading() - pair[1].start_heading()).abs();
            let gap = gap_pos.max(gap_heading);
            if gap > tolerance {
                return Err(PlanError::Discontinuous { index: i + 1, gap });
            }
        }
        Ok(())
    }

    /// Appends `other`, merging collinear lines at the seam.
    pub fn extend(&mut self, other: PathPlan) {
        let mut prims = std::mem::take(&mut self.primitives);
        prims.extend(other.primitives);
        *self = PathPlan::from_primitives(merge_primitives(prims), other.goal);
    }
}

/// Drops negligible rotations and fuses consecutive collinear lines.
fn merge_primitives(prims: Vec<Primitive>) -> Vec<Primitive> {
    let mut out: Vec<Primitive> = Vec::with_capacity(prims.len());
    for p in prims {
        if let Primitive::Rotate(r) = &p {
            if r.delta.abs() <= NEGLIGIBLE_ROTATION {
                continue;
            }
        }
        if let (Some(Primitive::Line(prev)), Primitive::Line(next)) = (out.last_mut(), &p) {
            let joined = prev.end.distance(next.start) <= DEGENERATE_DISTANCE;
            let collinear = wrap_angle(prev.heading() - next.heading()).abs() <= 1e-9;
            if joined && collinear {
                prev.end = next.end;
                continue;
            }
        }
        out.push(p);
    }
    out
}

/// Everything the planner computed on the way to a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub plan: PathPlan,
    /// Cell indices of the A* path.
    pub cells: Vec<usize>,
    pub cost: GridCost,
    /// Polyline through start, interior cell centers and goal.
    pub raw_points: Vec<Vec2>,
    /// The string-pulled polyline.
    pub waypoints: Vec<Vec2>,
}

impl PlanReport {
    pub fn raw_length(&self) -> f64 {
        polyline_length(&self.raw_points)
    }

    pub fn smoothed_length(&self) -> f64 {
        polyline_length(&self.waypoints)
    }
}

pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

pub fn plan(
    grid: &NavGrid,
    start: &Pose2D,
    goal: Vec2,
    extra: &[DynamicObstacle],
) -> Result<PathPlan, PlanError> {
    plan_with(grid, start, goal, extra, &PlanOptions::default())
}

pub fn plan_with(
    grid: &NavGrid,
    start: &Pose2D,
    goal: Vec2,
    extra: &[DynamicObstacle],
    opts: &PlanOptions,
) -> Result<PathPlan, PlanError> {
    plan_detailed(grid, start, goal, extra, opts).map(|r| r.plan)
}

fn escape_cell(grid: &NavGrid, from: (usize, usize)) -> Option<usize> {
    let reach = (MAX_ESCAPE / grid.resolution()).ceil() as usize;
    let start = grid.index(from.0, from.1);
    let mut seen = vec![false; grid.width() * grid.height()];
    let mut queue = VecDeque::from([(start, 0usize)]);
    seen[start] = true;
    while let Some((node, depth)) = queue.pop_front() {
        let (i, j) = grid.coords(node);
        if !grid.is_blocked(i, j) {
            return Some(node);
        }
        if depth >= reach {
            continue;
        }
        for (di, dj) in NEIGHBOURS {
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if grid.in_bounds(ni, nj) {
                let idx = grid.index(ni as usize, nj as usize);
                if !seen[idx] {
                    seen[idx] = true;
                    queue.push_back((idx, depth + 1));
                }
            }
        }
    }
    None
}

pub fn plan_detailed(
    grid: &NavGrid,
    start: &Pose2D,
    goal: Vec2,
    extra: &[DynamicObstacle],
    opts: &PlanOptions,
) -> Result<PlanReport, PlanError> {
    let owned;
    let grid = if extra.is_empty() {
        grid
    } else {
        owned = grid.with_obstacles(extra);
        &owned
    };
    let start_pt = start.position();
    if start_pt.distance(goal) <= DEGENERATE_DISTANCE {
        return Ok(PlanReport {
            plan: PathPlan::empty(goal),
            cells: Vec::new(),
            cost: GridCost::default(),
            raw_points: vec![start_pt, goal],
            waypoints: vec![start_pt],
        });
    }
    let goal_cell = grid
        .cell_of(goal)
        .filter(|&(i, j)| !grid.is_blocked(i, j))
        .ok_or(PlanError::GoalBlocked)?;
    let start_cell = grid.cell_of(start_pt).ok_or(PlanError::StartBlocked)?;
    let mut escape = false;
    let search_from = if grid.is_blocked(start_cell.0, start_cell.1) {
        if !opts.relax_start {
            return Err(PlanError::StartBlocked);
        }
        escape = true;
        escape_cell(grid, start_cell).ok_or(PlanError::StartBlocked)?
    } else {
        grid.index(start_cell.0, start_cell.1)
    };

    let (mut cells, cost) = astar(grid, search_from, grid.index(goal_cell.0, goal_cell.1))
        .ok_or(PlanError::NoPath)?;

    let mut raw_points = Vec::with_capacity(cells.len() + 2);
    raw_points.push(start_pt);
    if escape {
        let (i, j) = grid.coords(cells[0]);
        raw_points.push(grid.cell_center(i, j));
        cells.insert(0, grid.index(start_cell.0, start_cell.1));
    }
    for &c in cells.iter().skip(1).take(cells.len().saturating_sub(2)) {
        let (i, j) = grid.coords(c);
        raw_points.push(grid.cell_center(i, j));
    }
    raw_points.push(goal);
    raw_points.dedup_by(|a, b| a.distance(*b) <= DEGENERATE_DISTANCE);

    let waypoints = string_pull(grid, &raw_points);
    let prims = primitives_along(grid, *start, &waypoints[1..], &opts.rule);
    Ok(PlanReport {
        plan: PathPlan::from_primitives(merge_primitives(prims), goal),
        cells,
        cost,
        raw_points,
        waypoints,
    })
}

/// Greedy line-of-sight shortcutting. Consecutive raw points are always
/// accepted, so an escape segment out of a blocked start survives intact.
fn string_pull(grid: &NavGrid, points: &[Vec2]) -> Vec<Vec2> {
    let mut out = vec![points[0]];
    let mut i = 0;
    while i + 1 < points.len() {
        let mut j = i + 1;
        while j + 1 < points.len() && grid.segment_clear(points[i], points[j + 1]) {
            j += 1;
        }
        out.push(points[j]);
        i = j;
    }
    out
}

fn rotate_then_line(out: &mut Vec<Primitive>, pose: &mut Pose2D, to: Vec2) {
    let line = LinePrimitive { start: pose.position(), end: to };
    let delta = wrap_angle(line.heading() - pose.heading());
    if delta.abs() > NEGLIGIBLE_ROTATION {
        out.push(Primitive::Rotate(RotatePrimitive {
            at: pose.position(),
            from_heading: pose.heading(),
            delta,
        }));
    }
    out.push(Primitive::Line(line));
    *pose = Pose2D::at(to, line.heading());
}

/// Converts a polyline into primitives starting from `start`.
fn primitives_along(
    grid: &NavGrid,
    start: Pose2D,
    waypoints: &[Vec2],
    rule: &JunctionRule,
) -> Vec<Primitive> {
    let mut out = Vec::new();
    let mut pose = start;
    for &w in waypoints {
        let d = pose.position().distance(w);
        if d <= DEGENERATE_DISTANCE {
            continue;
        }
        let alpha = signed_angle_to(&pose, w).expect("non-degenerate leg").value();
        if alpha.abs() > rule.angle_threshold || d < rule.near_distance || alpha.abs() <= STRAIGHT_ANGLE
        {
            rotate_then_line(&mut out, &mut pose, w);
            continue;
        }
        match ArcPrimitive::tangent_through(&pose, w) {
            Some(arc) if grid.arc_clear(&arc) => {
                out.push(Primitive::Arc(arc));
                pose = Pose2D::at(w, arc.end_heading());
            }
            _ => rotate_then_line(&mut out, &mut pose, w),
        }
    }
    out
}

/// Plans through `waypoints` in order, each leg starting where the previous
/// one ended.
pub fn add_waypoint_chain(
    grid: &NavGrid,
    start: &Pose2D,
    waypoints: &[Vec2],
    opts: &PlanOptions,
) -> Result<PathPlan, PlanError> {
    let Some(&last) = waypoints.last() else {
        return Ok(PathPlan::empty(start.position()));
    };
    let mut pose = *start;
    let mut out = PathPlan::empty(last);
    for (index, &w) in waypoints.iter().enumerate() {
        let leg_opts = PlanOptions {
            relax_start: opts.relax_start && index == 0,
            ..*opts
        };
        let leg = plan_with(grid, &pose, w, &[], &leg_opts).map_err(|e| PlanError::Leg {
            index,
            source: Box::new(e),
        })?;
        if let Some(p) = leg.primitives().last() {
            pose = Pose2D::at(w, p.end_heading());
        }
        out.extend(leg);
    }
    out.goal = last;
    Ok(out)
}

/// Result of routing around a dynamic obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct Detour {
    pub plan: PathPlan,
    /// Arclength on the original plan where the detour leaves it.
    pub branch_point: f64,
    /// Arclength on the original plan where the detour comes back.
    pub rejoin_point: f64,
}

/// Replans from the robot pose to the plan goal with `obstacle` injected.
///
/// `progress` is the robot's arclength along `plan`.
pub fn detour(
    grid: &NavGrid,
    plan: &PathPlan,
    progress: f64,
    robot: &Pose2D,
    obstacle: DynamicObstacle,
    rule: &JunctionRule,
) -> Result<Detour, PlanError> {
    let total = plan.total_length();
    let remaining = plan.samples_from(progress, SAMPLE_STEP);
    if remaining
        .iter()
        .all(|p| p.distance(obstacle.center) >= obstacle.radius)
    {
        return Ok(Detour {
            plan: plan.clone(),
            branch_point: total,
            rejoin_point: total,
        });
    }
    let report = plan_detailed(
        grid,
        robot,
        plan.goal(),
        &[obstacle],
        &PlanOptions::relaxed(*rule),
    )
    .map_err(|e| match e {
        PlanError::InvalidGrid(_) => e,
        _ => PlanError::NoDetour,
    })?;
    let new_plan = report.plan;
    let (branch_point, rejoin_point) = divergence(plan, progress, &new_plan);
    Ok(Detour {
        plan: new_plan,
        branch_point,
        rejoin_point,
    })
}

/// Arclengths on `plan`, from `progress` on, where `other` first leaves it
/// and later comes back (both within `DIVERGENCE_TOLERANCE`). Either is the
/// plan length if it never happens.
pub fn divergence(plan: &PathPlan, progress: f64, other: &PathPlan) -> (f64, f64) {
    let total = plan.total_length();
    let mut branch = total;
    let mut rejoin = total;
    let mut k = 0usize;
    let mut diverged = false;
    loop {
        let s = (progress + k as f64 * SAMPLE_STEP).min(total);
        if let Some(p) = plan.point_at(s) {
            let off = other.distance_to(p) > DIVERGENCE_TOLERANCE;
            if !diverged && off {
                diverged = true;
                branch = s;
            } else if diverged && !off {
                rejoin = s;
                break;
            }
        }
        if s >= total {
            break;
        }
        k += 1;
    }
    (branch, rejoin)
}

/// Turns a polyline into primitives from `start` with the junction rule.
/// Arcs are only used where `grid` leaves them clear; straight legs are not
/// collision-checked.
pub fn plan_polyline(grid: &NavGrid, start: &Pose2D, waypoints: &[Vec2], rule: &JunctionRule) -> PathPlan {
    let goal = waypoints.last().copied().unwrap_or(start.position());
    PathPlan::from_primitives(merge_primitives(primitives_along(grid, *start, waypoints, rule)), goal)
}
