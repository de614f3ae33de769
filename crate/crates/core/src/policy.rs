//! Scripted human policies for headless trials.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{PolicyConfig, SimConfig};
use crate::engine::{Session, SessionError};
use crate::geometry::Vec2;
use crate::log::TrialLog;
use crate::metrics::TrialMetrics;
use crate::planner::{astar, distance_field, NavGrid, NEIGHBOURS};
use crate::scenario::Owner;

/// Distance at which a policy considers a point reached.
pub const REACHED: f64 = 0.15;

/// Seconds between random-walk heading changes, in ticks.
const WALK_PERIOD: u64 = 25;

#[derive(Debug, Clone)]
pub struct HumanPolicy {
    kind: PolicyConfig,
    seed: u64,
    cursor: usize,
    window: Option<(u64, u64)>,
    spawn: Option<Vec2>,
    fields: BTreeMap<u8, Vec<f64>>,
}

/// Input that moves from `from` toward `to` without overshooting.
fn toward(from: Vec2, to: Vec2, step: f64) -> Vec2 {
    let d = to - from;
    let n = d.norm();
    if n < 1e-12 {
        return Vec2::ZERO;
    }
    if n < step {
        d * (1.0 / step)
    } else {
        d * (1.0 / n)
    }
}

/// Like `toward`, but routes around walls along the grid's shortest path.
pub fn navigate(grid: &NavGrid, from: Vec2, to: Vec2, step: f64) -> Vec2 {
    if grid.segment_clear(from, to) {
        return toward(from, to, step);
    }
    let (Some((si, sj)), Some((gi, gj))) = (grid.cell_of(from), grid.cell_of(to)) else {
        return toward(from, to, step);
    };
    if grid.is_blocked(si, sj) || grid.is_blocked(gi, gj) {
        return toward(from, to, step);
    }
    let Some((cells, _)) = astar(grid, grid.index(si, sj), grid.index(gi, gj)) else {
        return Vec2::ZERO;
    };
    let waypoint = cells
        .iter()
        .skip(1)
        .take(12)
        .map(|&c| {
            let (i, j) = grid.coords(c);
            grid.cell_center(i, j)
        })
        .take_while(|&c| grid.segment_clear(from, c))
        .last();
    match waypoint {
        Some(w) => toward(from, w, step),
        None => {
            let (i, j) = grid.coords(cells[cells.len().min(2) - 1]);
            toward(from, grid.cell_center(i, j), step)
        }
    }
}

impl HumanPolicy {
    pub fn new(kind: &PolicyConfig, seed: u64) -> Self {
        Self {
            kind: kind.clone(),
            seed,
            cursor: 0,
            window: None,
            spawn: None,
            fields: BTreeMap::new(),
        }
    }

    pub fn from_config(config: &SimConfig) -> Self {
        Self::new(&config.policy, config.seed)
    }

    /// Active window of the blocker in ticks, drawn from the seed unless
    /// configured.
    pub fn blocker_window(&self, config: &SimConfig) -> Option<(u64, u64)> {
        let PolicyConfig::Blocker { window } = &self.kind else {
            return None;
        };
        Some(match window {
            Some([a, b]) => (config.ticks(*a), config.ticks(*b)),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xb10c_4e55);
                let start = rng.random_range(0.5..3.0);
                let length = rng.random_range(10.0..20.0);
                (config.ticks(start), config.ticks(start + length))
            }
        })
    }

    /// Movement command after observing `session` at its current tick.
    pub fn input(&mut self, session: &Session) -> Vec2 {
        let Some(human) = session.state().human.as_ref() else {
            return Vec2::ZERO;
        };
        let pos = human.pose.position();
        let step = human.speed * session.config().dt;
        let tick = session.tick_count();
        if self.spawn.is_none() {
            self.spawn = Some(pos);
        }
        match &self.kind {
            PolicyConfig::Idle | PolicyConfig::Remote => Vec2::ZERO,
            PolicyConfig::WaypointFollower { points } => {
                while let Some(p) = points.get(self.cursor) {
                    let p = Vec2::new(p[0], p[1]);
                    if pos.distance(p) > REACHED {
                        return navigate(session.human_grid(), pos, p, step);
                    }
                    self.cursor += 1;
                }
                Vec2::ZERO
            }
            PolicyConfig::RandomWalk => {
                let block = tick / WALK_PERIOD;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.rotate_left(17) ^ block.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                Vec2::from_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            }
            PolicyConfig::Blocker { .. } => {
                if self.window.is_none() {
                    self.window = self.blocker_window(session.config());
                }
                let (start, stop) = self.window.expect("window set");
                if tick < start {
                    return Vec2::ZERO;
                }
                // Once the window closes the blocker collects its own gems.
                if tick >= stop {
                    return self.greedy(session, pos, step);
                }
                let active: Vec<Vec2> = session.viz().active_markers().map(|m| m.position).collect();
                if active.is_empty() {
                    return Vec2::ZERO;
                }
                let target = active[active.len() / 2];
                if pos.distance(target) > REACHED {
                    navigate(session.human_grid(), pos, target, step)
                } else {
                    Vec2::ZERO
                }
            }
            PolicyConfig::GreedyCollector => self.greedy(session, pos, step),
        }
    }

    fn greedy(&mut self, session: &Session, pos: Vec2, step: f64) -> Vec2 {
        let grid = session.human_grid();
        let cell = grid.cell_of(pos).map(|(i, j)| grid.index(i, j));
        let mut best: Option<(f64, u8, Vec2)> = None;
        for g in session.gems().iter().filter(|g| g.owner == Owner::Human && !g.collected) {
            let field = self.fields.entry(g.id).or_insert_with(|| field_to(grid, g.position));
            let d = cell.map_or(f64::INFINITY, |c| field[c]);
            let d = if d.is_finite() { d } else { pos.distance(g.position) + 1e6 };
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, g.id, g.position));
            }
        }
        let Some((_, id, goal)) = best else {
            // Done collecting: clear the room by walking back to the start.
            let home = self.spawn.expect("spawn recorded");
            return if pos.distance(home) > REACHED {
                navigate(grid, pos, home, step)
            } else {
                Vec2::ZERO
            };
        };
        if pos.distance(goal) <= 0.05 {
            return Vec2::ZERO;
        }
        if grid.segment_clear(pos, goal) || cell.is_none() {
            return toward(pos, goal, step);
        }
        let field = &self.fields[&id];
        let (i, j) = grid.coords(cell.expect("inside the grid"));
        let mut next: Option<(f64, Vec2)> = None;
        for (di, dj) in NEIGHBOURS {
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if !grid.in_bounds(ni, nj) {
                continue;
            }
            let (ni, nj) = (ni as usize, nj as usize);
            let d = field[grid.index(ni, nj)];
            let c = grid.cell_center(ni, nj);
            if d.is_finite() && grid.segment_clear(pos, c) && next.is_none_or(|(bd, _)| d < bd) {
                next = Some((d, c));
            }
        }
        match next {
            Some((_, c)) => toward(pos, c, step),
            None => toward(pos, goal, step),
        }
    }
}

fn field_to(grid: &NavGrid, p: Vec2) -> Vec<f64> {
    match grid.cell_of(p) {
        Some((i, j)) => distance_field(grid, grid.index(i, j)),
        None => vec![f64::INFINITY; grid.width() * grid.height()],
    }
}

/// Runs a full headless trial with the configured policy.
pub fn run_trial(config: &SimConfig) -> Result<(TrialLog, TrialMetrics), SessionError> {
    let mut session = Session::new(config.clone())?;
    let mut policy = HumanPolicy::from_config(config);
    while !session.is_ended() {
        let input = policy.input(&session);
        session.buffer_input(input);
        session.tick();
    }
    let metrics = session.metrics();
    Ok((session.into_log(), metrics))
}
