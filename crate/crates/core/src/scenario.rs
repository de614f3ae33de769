//! Study scenarios: hallway passing around a loop of rooms, shared-room gem
//! retrieval, and a plain waypoint tour. Runtime state lives in the engine;
//! this module holds the scenario rules as functions over that state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose2D, Vec2};
use crate::planner::{plan_polyline, DynamicObstacle, JunctionRule, NavGrid, PathPlan};
pub use crate::metrics::{finalize_metrics, GemRecord, TrialMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Robot,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gem {
    pub id: u8,
    pub position: Vec2,
    pub owner: Owner,
    pub collected: bool,
    pub collect_radius: f64,
    /// Consecutive ticks the human has stood inside this gem.
    pub dwell_ticks: u64,
}

/// Gems from `slots` in order: the first `robot` go to the robot, the next
/// `human` to the human. Slot ids double as gem ids.
pub fn assign_gems(
    slots: &BTreeMap<u8, Vec2>,
    order: &[u8],
    robot: usize,
    human: usize,
    collect_radius: f64,
) -> Result<Vec<Gem>, String> {
    if robot + human > order.len() {
        return Err(format!(
            "{} gems requested but only {} slots available",
            robot + human,
            order.len()
        ));
    }
    let mut gems = Vec::with_capacity(robot + human);
    for (k, &slot) in order.iter().take(robot + human).enumerate() {
        let position = *slots
            .get(&slot)
            .ok_or_else(|| format!("map has no gem slot {slot}"))?;
        gems.push(Gem {
            id: slot,
            position,
            owner: if k < robot { Owner::Robot } else { Owner::Human },
            collected: false,
            collect_radius,
            dwell_ticks: 0,
        });
    }
    gems.sort_by_key(|g| g.id);
    Ok(gems)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GemSelection {
    pub chosen: Option<u8>,
    pub length: Option<f64>,
    pub unreachable: Vec<u8>,
}

/// Nearest uncollected robot gem by planned path length, lowest id on ties.
/// Gems listed in `skip` are ignored; gems without a path are reported.
pub fn select_gem(
    gems: &[Gem],
    skip: &[u8],
    mut path_len: impl FnMut(Vec2) -> Option<f64>,
) -> GemSelection {
    let mut out = GemSelection::default();
    let mut ids: Vec<&Gem> = gems
        .iter()
        .filter(|g| g.owner == Owner::Robot && !g.collected && !skip.contains(&g.id))
        .collect();
    ids.sort_by_key(|g| g.id);
    for g in ids {
        match path_len(g.position) {
            Some(len) => {
                if out.length.is_none_or(|best| len < best) {
                    out.chosen = Some(g.id);
                    out.length = Some(len);
                }
            }
            None => out.unreachable.push(g.id),
        }
    }
    out
}

/// Advances human dwell timers; returns ids collected this tick.
pub fn human_dwell_tick(gems: &mut [Gem], human: Vec2, dwell_ticks: u64) -> Vec<u8> {
    let mut collected = Vec::new();
    for g in gems.iter_mut().filter(|g| g.owner == Owner::Human && !g.collected) {
        if human.distance(g.position) <= g.collect_radius {
            g.dwell_ticks += 1;
            if g.dwell_ticks >= dwell_ticks {
                g.collected = true;
                collected.push(g.id);
            }
        } else {
            g.dwell_ticks = 0;
        }
    }
    collected
}

pub fn all_collected(gems: &[Gem]) -> bool {
    gems.iter().all(|g| g.collected)
}

/// Room indices ordered counter-clockwise around the centroid, starting
/// from the room with the smallest angle.
pub fn loop_order(rooms: &[Vec2]) -> Vec<usize> {
    if rooms.is_empty() {
        return Vec::new();
    }
    let n = rooms.len() as f64;
    let centroid = rooms.iter().fold(Vec2::ZERO, |acc, &p| acc + p) * (1.0 / n);
    let mut idx: Vec<usize> = (0..rooms.len()).collect();
    idx.sort_by(|&a, &b| {
        let ta = (rooms[a] - centroid).angle();
        let tb = (rooms[b] - centroid).angle();
        ta.total_cmp(&tb).then(a.cmp(&b))
    });
    idx
}

/// Straight hallway centerline between two room centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    pub a: Vec2,
    pub b: Vec2,
}

impl Centerline {
    pub fn length(&self) -> f64 {
        self.a.distance(self.b)
    }

    pub fn dir(&self) -> Vec2 {
        (self.b - self.a) * (1.0 / self.length())
    }

    /// Left-hand normal.
    pub fn normal(&self) -> Vec2 {
        self.dir().perp()
    }

    /// Along-track and signed cross-track (left positive) coordinates.
    pub fn frame(&self, p: Vec2) -> (f64, f64) {
        let rel = p - self.a;
        (rel.dot(self.dir()), rel.dot(self.normal()))
    }

    pub fn point(&self, along: f64, offset: f64) -> Vec2 {
        self.a + self.dir() * along + self.normal() * offset
    }

    pub fn distance_to(&self, p: Vec2) -> f64 {
        crate::geometry::LinePrimitive { start: self.a, end: self.b }.distance_to(p)
    }
}

/// True when the human stands on the centerline ahead of the robot.
pub fn blocks_centerline(
    line: &Centerline,
    robot: Vec2,
    human: Vec2,
    block_radius: f64,
    min_ahead: f64,
    lookahead: f64,
) -> bool {
    let (rs, _) = line.frame(robot);
    let (hs, ho) = line.frame(human);
    let ahead = hs - rs;
    ho.abs() < block_radius && ahead >= min_ahead && ahead <= lookahead && hs <= line.length()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LateralShift {
    pub side: Side,
    pub offset: f64,
    pub plan: PathPlan,
}

/// Largest offset from the centerline at `along` reachable on `side`
/// without leaving free space, sampled every `step`.
fn free_offset(grid: &NavGrid, line: &Centerline, along: f64, sign: f64, step: f64) -> f64 {
    let mut off = 0.0;
    loop {
        let next = off + step;
        if next > 5.0 || grid.point_blocked(line.point(along, sign * next)) {
            return off;
        }
        off = next;
    }
}

/// Sub-path that sidesteps a human standing on the centerline: leave the
/// centerline before the human, pass at `clearance` on the roomier side
/// (left on ties) and return after. `None` when no collision-free shift fits.
pub fn lateral_shift(
    grid: &NavGrid,
    line: &Centerline,
    robot: &Pose2D,
    human: Vec2,
    clearance: f64,
    rule: &JunctionRule,
) -> Option<LateralShift> {
    let (rs, _) = line.frame(robot.position());
    let (hs, ho) = line.frame(human);
    let step = grid.resolution() * 0.5;
    let left_max = free_offset(grid, line, hs, 1.0, step);
    let right_max = free_offset(grid, line, hs, -1.0, step);
    let left_room = left_max - ho;
    let right_room = ho + right_max;
    // One extra cell so the straight pass stays clear of the disc's cells.
    let pass = clearance + grid.resolution();
    let (side, offset) = if left_room >= right_room {
        (Side::Left, (ho + pass).min(left_max))
    } else {
        (Side::Right, (ho - pass).max(-right_max))
    };
    let lead = 0.8;
    let enter = hs - lead;
    let leave = hs + lead;
    if enter <= rs + 0.1 || leave >= line.length() - 0.1 {
        return None;
    }
    let points = [line.point(enter, offset), line.point(leave, offset), line.b];
    let blocked = grid.with_obstacles(&[DynamicObstacle {
        center: human,
        radius: clearance,
    }]);
    let mut from = robot.position();
    for &p in &points {
        if !blocked.segment_clear(from, p) {
            return None;
        }
        from = p;
    }
    let plan = plan_polyline(&blocked, robot, &points, rule);
    Some(LateralShift { side, offset, plan })
}

/// Default hard-mode obstruction for a leg: `offset` meters before the
/// target room center along the centerline.
pub fn obstruction_point(line: &Centerline, offset: f64) -> Vec2 {
    let along = (line.length() - offset).max(0.0);
    line.point(along, 0.0)
}
