//! Deterministic fixed-step session loop, state hashing and replay.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::battery::{BatteryDecision, BatteryMode, BatteryState};
use crate::config::{ConfigError, ScenarioKind, SimConfig};
use crate::geometry::{Pose2D, Primitive, Vec2};
use crate::interaction::{assess_block, translation_unsafe, Action, Arbiter, HumanState};
use crate::log::{
    ChargeTrigger, DetourSource, EndReason, Event, LogError, LogHeader, Record, TrialLog, WaitReason,
};
use crate::metrics::{MetricsAccumulator, TrialMetrics};
use crate::motion::{select_mode, Hold, Mode, MotionError, RobotState};
use crate::planner::{
    self, distance_field, divergence, plan_polyline, plan_with, Detour, DynamicObstacle, JunctionRule, MapFile,
    NavGrid, PathPlan, PlanOptions,
};
use crate::scenario::{
    all_collected, assign_gems, blocks_centerline, human_dwell_tick, lateral_shift, loop_order,
    obstruction_point, select_gem, Centerline, Gem, Owner,
};
use crate::viz::{self, TurnSignal, VizState};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scenario setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Scenario,
    ReturnToBase,
    Charging,
    Done,
}

impl Task {
    fn code(self) -> u8 {
        match self {
            Task::Scenario => 0,
            Task::ReturnToBase => 1,
            Task::Charging => 2,
            Task::Done => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstruction {
    pub point: Vec2,
    /// Position in the loop of the room whose visit removes it.
    pub room: usize,
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HallwayState {
    /// Room centers in loop order.
    pub rooms: Vec<Vec2>,
    /// Positions in `rooms` still to visit, in order.
    pub itinerary: Vec<usize>,
    pub leg: usize,
    pub from: usize,
    /// One per leg in hard mode.
    pub obstructions: Vec<Obstruction>,
}

impl HallwayState {
    pub fn target(&self) -> Option<usize> {
        self.itinerary.get(self.leg).copied()
    }

    pub fn centerline(&self) -> Option<Centerline> {
        self.target().map(|t| Centerline {
            a: self.rooms[self.from],
            b: self.rooms[t],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalState {
    pub gems: Vec<Gem>,
    pub target: Option<u8>,
    pub unreachable: Vec<u8>,
    pub dwell_ticks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TourState {
    pub waypoints: Vec<Vec2>,
    pub next: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioState {
    Hallway(HallwayState),
    Retrieval(RetrievalState),
    Tour(TourState),
}

/// Everything that evolves during a trial and is covered by the state hash.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub robot: RobotState,
    pub human: Option<HumanState>,
    pub arbiter: Arbiter,
    pub task: Task,
    pub scenario: ScenarioState,
    pub input: Vec2,
    pub safety_hold: bool,
    pub obstruction_hold: bool,
    pub stranded_risk: bool,
    pub mode: Mode,
}

struct Fault(String);

impl From<MotionError> for Fault {
    fn from(e: MotionError) -> Self {
        Fault(e.to_string())
    }
}

/// One deterministic simulation instance.
#[derive(Debug, Clone)]
pub struct Session {
    config: SimConfig,
    map: MapFile,
    robot_grid: NavGrid,
    human_grid: NavGrid,
    base_field: Option<Vec<f64>>,
    tick: u64,
    state: SimState,
    pending_input: Option<Vec2>,
    pending_stale: Vec<u64>,
    log: TrialLog,
    metrics: MetricsAccumulator,
    viz: VizState,
    signal: TurnSignal,
    message: String,
    blocked: bool,
    translated: f64,
    tick_events: Vec<Event>,
    ended: Option<EndReason>,
}

fn nearest_free(grid: &NavGrid, p: Vec2) -> Option<Vec2> {
    if !grid.point_blocked(p) {
        return Some(p);
    }
    let mut best: Option<(f64, Vec2)> = None;
    for j in 0..grid.height() {
        for i in 0..grid.width() {
            if !grid.is_blocked(i, j) {
                let c = grid.cell_center(i, j);
                let d = c.distance(p);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, c));
                }
            }
        }
    }
    best.map(|(_, c)| c)
}

impl Session {
    pub fn new(config: SimConfig) -> Result<Self, SessionError> {
        let map = config.load_map()?;
        Self::with_map(config, map)
    }

    pub fn with_map(config: SimConfig, map: MapFile) -> Result<Self, SessionError> {
        config.validate()?;
        let robot_grid = map.nav_grid(config.planner.inflation_radius);
        let human_grid = map.nav_grid(config.interaction.human_radius);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mode = config.battery.mode;
        let base = map.base;
        if mode != BatteryMode::Disabled && base.is_none() {
            return Err(SessionError::Setup("battery management needs a base on the map".into()));
        }
        let battery = BatteryState::new(&config.battery.params, mode, base.unwrap_or(Vec2::ZERO));
        let ip = &config.interaction;
        let (robot_pose, human_pose, scenario) = match config.scenario {
            ScenarioKind::Hallway => {
                let hp = &config.hallway;
                let centers = &map.room_centers;
                if centers.len() < 2 {
                    return Err(SessionError::Setup("hallway map needs at least two rooms".into()));
                }
                let order = loop_order(centers);
                let rooms: Vec<Vec2> = order.iter().map(|&i| centers[i]).collect();
                let n = rooms.len();
                let start = match hp.robot_room {
                    Some(r) if r < n => r,
                    Some(r) => return Err(SessionError::Setup(format!("robot_room {r} out of range"))),
                    None => rng.random_range(0..n),
                };
                let human_room = match hp.human_room {
                    Some(r) if r < n && r != start => r,
                    Some(r) => return Err(SessionError::Setup(format!("invalid human_room {r}"))),
                    None => {
                        let k = rng.random_range(0..n - 1);
                        if k >= start {
                            k + 1
                        } else {
                            k
                        }
                    }
                };
                let itinerary: Vec<usize> = (1..n).map(|k| (start + k) % n).collect();
                let next = rooms[itinerary[0]];
                let heading = (next - rooms[start]).angle();
                let centroid = rooms.iter().fold(Vec2::ZERO, |a, &p| a + p) * (1.0 / n as f64);
                let out = rooms[human_room] - centroid;
                let spot = rooms[human_room] + Vec2::new(1.5 * out.x.signum(), 1.5 * out.y.signum());
                let spot = nearest_free(&human_grid, spot)
                    .ok_or_else(|| SessionError::Setup("no free cell for the human".into()))?;
                let mut obstructions = Vec::new();
                if hp.hard_mode {
                    let mut from = start;
                    for (k, &room) in itinerary.iter().enumerate() {
                        let line = Centerline { a: rooms[from], b: rooms[room] };
                        let point = match &hp.obstructions {
                            Some(points) => match points.get(k) {
                                Some(p) => Vec2::new(p[0], p[1]),
                                None => break,
                            },
                            None => obstruction_point(&line, hp.obstruction_offset),
                        };
                        obstructions.push(Obstruction { point, room, removed: false });
                        from = room;
                    }
                }
                (
                    Pose2D::at(rooms[start], heading),
                    Some(Pose2D::at(spot, 0.0)),
                    ScenarioState::Hallway(HallwayState {
                        rooms,
                        itinerary,
                        leg: 0,
                        from: start,
                        obstructions,
                    }),
                )
            }
            ScenarioKind::Retrieval => {
                let rp = &config.retrieval;
                let start = base.ok_or_else(|| SessionError::Setup("retrieval map needs a base".into()))?;
                let order: Vec<u8> = match &rp.slots {
                    Some(s) => s.clone(),
                    None => {
                        let mut ids: Vec<u8> = map.gem_slots.keys().copied().collect();
                        ids.shuffle(&mut rng);
                        ids
                    }
                };
                let gems = assign_gems(&map.gem_slots, &order, rp.robot_gems, rp.human_gems, rp.collect_radius)
                    .map_err(|e| SessionError::Setup(e.to_string()))?;
                let spawn = match rp.human_spawn {
                    Some(p) => Vec2::new(p[0], p[1]),
                    None => {
                        let w = map.width as f64 * map.resolution;
                        let h = map.height as f64 * map.resolution;
                        Vec2::new(w - start.x, h - start.y)
                    }
                };
                let spawn = nearest_free(&human_grid, spawn)
                    .ok_or_else(|| SessionError::Setup("no free cell for the human".into()))?;
                (
                    Pose2D::at(start, 0.0),
                    Some(Pose2D::at(spawn, std::f64::consts::PI)),
                    ScenarioState::Retrieval(RetrievalState {
                        gems,
                        target: None,
                        unreachable: Vec::new(),
                        dwell_ticks: config.ticks(rp.dwell),
                    }),
                )
            }
            ScenarioKind::Tour => {
                let tp = &config.tour;
                let start = match (tp.start, base) {
                    (Some(s), _) => Pose2D::new(s[0], s[1], s[2]),
                    (None, Some(b)) => Pose2D::at(b, 0.0),
                    (None, None) => return Err(SessionError::Setup("tour needs a start pose or a base".into())),
                };
                let human = tp.human_spawn.map(|p| Pose2D::new(p[0], p[1], 0.0));
                (
                    start,
                    human,
                    ScenarioState::Tour(TourState {
                        waypoints: tp.waypoints.iter().map(|p| Vec2::new(p[0], p[1])).collect(),
                        next: 0,
                    }),
                )
            }
        };
        let base_field = match (mode, base) {
            (BatteryMode::ContinuousMonitor, Some(b)) => robot_grid
                .cell_of(b)
                .map(|(i, j)| distance_field(&robot_grid, robot_grid.index(i, j))),
            _ => None,
        };
        let robot = RobotState::new(robot_pose, battery);
        let human = human_pose.map(|p| HumanState::new(p, ip));
        let state = SimState {
            robot,
            human,
            arbiter: Arbiter::default(),
            task: Task::Scenario,
            scenario,
            input: Vec2::ZERO,
            safety_hold: false,
            obstruction_hold: false,
            stranded_risk: false,
            mode: Mode::Idle,
        };
        let header = LogHeader::new(&config, map.text(), map.digest());
        let metrics = MetricsAccumulator::new(config.dt);
        let mut s = Self {
            config,
            map,
            robot_grid,
            human_grid,
            base_field,
            tick: 0,
            state,
            pending_input: None,
            pending_stale: Vec::new(),
            log: TrialLog::new(header),
            metrics,
            viz: VizState {
                markers: Vec::new(),
                signal: TurnSignal::None,
                bubble: viz::ThoughtBubble {
                    visible: false,
                    message: String::new(),
                },
                battery: viz::BatteryIndicator { fraction: 1.0 },
            },
            signal: TurnSignal::None,
            message: String::new(),
            blocked: false,
            translated: 0.0,
            tick_events: Vec::new(),
            ended: None,
        };
        s.message = s.compose_message();
        s.refresh_viz();
        Ok(s)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn map(&self) -> &MapFile {
        &self.map
    }

    pub fn robot_grid(&self) -> &NavGrid {
        &self.robot_grid
    }

    pub fn human_grid(&self) -> &NavGrid {
        &self.human_grid
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Mutable access for tests and tooling; the loop itself never needs it.
    pub fn state_mut(&mut self) -> &mut SimState {
        &mut self.state
    }

    pub fn viz(&self) -> &VizState {
        &self.viz
    }

    pub fn message(&self) -> &str {
        &self.message
    }

    pub fn log(&self) -> &TrialLog {
        &self.log
    }

    pub fn into_log(self) -> TrialLog {
        self.log
    }

    pub fn metrics(&self) -> TrialMetrics {
        self.metrics.current()
    }

    pub fn is_ended(&self) -> bool {
        self.ended.is_some()
    }

    pub fn end_reason(&self) -> Option<EndReason> {
        self.ended
    }

    /// Events emitted by the most recent tick.
    pub fn last_events(&self) -> &[Event] {
        &self.tick_events
    }

    /// Whether the robot's projection was blocked on the last tick.
    pub fn blocked(&self) -> bool {
        self.blocked
    }

    pub fn gems(&self) -> &[Gem] {
        match &self.state.scenario {
            ScenarioState::Retrieval(r) => &r.gems,
            _ => &[],
        }
    }

    /// Buffers a movement command for the next tick. Later calls before the
    /// tick replace earlier ones.
    pub fn buffer_input(&mut self, movement: Vec2) {
        self.pending_input = Some(movement.clamp_unit());
    }

    /// Buffers an input exactly as a log recorded it. Recorded inputs are
    /// already clamped, and clamping twice can move the last bit.
    pub fn buffer_logged_input(&mut self, movement: Vec2) {
        self.pending_input = Some(if movement.norm() <= 1.0 + 1e-9 {
            movement
        } else {
            movement.clamp_unit()
        });
    }

    /// Records an input that arrived too late to be applied.
    pub fn note_stale(&mut self, claimed_tick: u64) {
        self.pending_stale.push(claimed_tick);
    }

    /// Advances one fixed step. Does nothing once the trial has ended.
    pub fn tick(&mut self) {
        if self.ended.is_some() {
            return;
        }
        self.tick += 1;
        self.tick_events.clear();
        let mut events = Vec::new();
        let result = catch_unwind(AssertUnwindSafe(|| self.advance(&mut events)));
        let fault = match result {
            Ok(Ok(())) => None,
            Ok(Err(Fault(m))) => Some(m),
            Err(p) => Some(
                p.downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into()),
            ),
        };
        if let Some(message) = fault {
            events.push(Event::Fault { message });
        }
        for e in &events {
            self.record(Record::Event {
                tick: self.tick,
                event: e.clone(),
            });
        }
        self.tick_events = events;
        self.snapshot_record();
        let faulted = self.tick_events.iter().any(|e| matches!(e, Event::Fault { .. }));
        if faulted {
            self.end(EndReason::Fault);
        } else if self.state.task == Task::Done {
            self.end(EndReason::Completed);
        } else if self.tick >= self.config.tick_budget {
            self.end(EndReason::Budget);
        }
    }

    /// Terminates the trial, appending the final record.
    pub fn end(&mut self, reason: EndReason) {
        if self.ended.is_some() {
            return;
        }
        self.ended = Some(reason);
        let event = Event::TrialEnd {
            reason,
            did_not_finish: reason != EndReason::Completed,
        };
        self.record(Record::Event {
            tick: self.tick,
            event: event.clone(),
        });
        self.tick_events.push(event);
    }

    fn record(&mut self, r: Record) {
        self.metrics.accept(&r);
        self.log.push(&r);
    }

    fn snapshot_record(&mut self) {
        let r = &self.state.robot;
        let human = self.state.human.as_ref().map(|h| [h.pose.x, h.pose.y, h.pose.heading()]);
        let separation = self.state.human.as_ref().map(|h| h.pose.position().distance(r.pose.position()));
        let rec = Record::Snapshot {
            tick: self.tick,
            hash: format!("{:016x}", self.state_hash()),
            robot: [r.pose.x, r.pose.y, r.pose.heading()],
            human,
            mode: r.mode,
            battery: r.battery.remaining_range,
            translated: self.translated,
            separation,
            blocked: self.blocked,
        };
        self.record(rec);
    }

    fn advance(&mut self, ev: &mut Vec<Event>) -> Result<(), Fault> {
        // (1) buffered input
        for claimed in std::mem::take(&mut self.pending_stale) {
            ev.push(Event::StaleInput { claimed_tick: claimed });
        }
        if let Some(m) = self.pending_input.take() {
            if m != self.state.input {
                self.state.input = m;
                self.record(Record::Input {
                    tick: self.tick,
                    movement: [m.x, m.y],
                });
            }
        }
        // (2) human
        let input = self.state.input;
        if let Some(h) = self.state.human.as_mut() {
            h.set_input(input);
            h.step(&self.human_grid, self.config.dt);
        }
        // (3) battery
        self.continuous_check(ev)?;
        // (4) interaction
        self.interaction(ev)?;
        // (5) scenario
        self.scenario_tick(ev)?;
        // (6) motion
        self.motion(ev);
        // (7) viz
        self.message = self.compose_message();
        self.refresh_viz();
        if self.viz.signal != self.signal {
            self.signal = self.viz.signal;
            ev.push(Event::Signal { signal: self.signal });
        }
        Ok(())
    }

    fn refresh_viz(&mut self) {
        let human = self.state.human.as_ref().map(|h| h.pose.position());
        self.viz = viz::compute(&self.state.robot, human, &self.message, &self.config.viz, &self.config.motion);
    }

    fn options(&self) -> PlanOptions {
        PlanOptions::relaxed(self.config.motion.junction_rule())
    }

    fn plan_to(&self, from: &Pose2D, goal: Vec2) -> Option<PathPlan> {
        plan_with(&self.robot_grid, from, goal, &[], &self.options()).ok()
    }

    /// Route to the dock as in-place turns and straight segments, so its
    /// length does not depend on the current heading.
    fn plan_home(&self, from: &Pose2D) -> Option<PathPlan> {
        let rule = JunctionRule {
            angle_threshold: 0.0,
            near_distance: self.config.motion.near_distance,
        };
        let base = self.state.robot.battery.base;
        plan_with(&self.robot_grid, from, base, &[], &PlanOptions::relaxed(rule)).ok()
    }

    fn at_base(&self) -> bool {
        let r = &self.state.robot;
        r.battery.enabled() && r.battery.at_base(r.pose.position(), self.config.battery.params.dock_radius)
    }

    fn go_charge(&mut self, trigger: ChargeTrigger, plan: Option<PathPlan>, ev: &mut Vec<Event>) -> Result<(), Fault> {
        let pose = self.state.robot.pose;
        let plan = match plan {
            Some(p) => Some(p),
            None => self.plan_home(&pose),
        };
        let Some(plan) = plan else {
            if !self.state.stranded_risk {
                self.state.stranded_risk = true;
                ev.push(Event::StrandedRisk);
            }
            return Ok(());
        };
        ev.push(Event::GoCharge {
            trigger,
            remaining: self.state.robot.battery.remaining_range,
        });
        self.state.robot.set_plan(plan, &self.config.motion)?;
        self.state.task = Task::ReturnToBase;
        if let ScenarioState::Retrieval(r) = &mut self.state.scenario {
            r.target = None;
        }
        Ok(())
    }

    fn continuous_check(&mut self, ev: &mut Vec<Event>) -> Result<(), Fault> {
        let robot = &self.state.robot;
        let batt = robot.battery;
        if batt.mode != BatteryMode::ContinuousMonitor || self.state.task != Task::Scenario || batt.stranded {
            return Ok(());
        }
        let margin = self.config.battery.params.margin;
        let p = robot.pose.position();
        if let (Some(field), Some((i, j))) = (&self.base_field, self.robot_grid.cell_of(p)) {
            let grid_len = field[self.robot_grid.index(i, j)];
            // Smoothed plans are never longer than 1.21 times the grid
            // path plus the offsets of start and goal inside their cells.
            let bound = 1.21 * (grid_len + 2.0 * self.robot_grid.resolution());
            if grid_len.is_finite() && batt.remaining_range > bound + margin {
                return Ok(());
            }
        }
        let pose = robot.pose;
        let mut plan = None;
        let check = batt.check_continuous(p, margin, |_, _| {
            let pl = self.plan_home(&pose)?;
            let len = pl.total_length();
            plan = Some(pl);
            Some(len)
        });
        if check.stranded_risk && !self.state.stranded_risk {
            self.state.stranded_risk = true;
            ev.push(Event::StrandedRisk);
        }
        if check.decision == BatteryDecision::AbandonAndCharge {
            self.go_charge(ChargeTrigger::Continuous, plan, ev)?;
        }
        Ok(())
    }

    fn interaction(&mut self, ev: &mut Vec<Event>) -> Result<(), Fault> {
        self.blocked = false;
        let Some(human) = self.state.human.as_ref().map(|h| h.pose.position()) else {
            return Ok(());
        };
        let ip = self.config.interaction;
        let robot = &self.state.robot;
        let engaged = !robot.plan().is_empty()
            && matches!(self.state.task, Task::Scenario | Task::ReturnToBase)
            && !robot.battery.stranded;
        if !engaged {
            if self.state.arbiter.waiting() {
                self.state.arbiter.commit(self.tick, Action::Resume, ip.latch_ticks);
                ev.push(Event::Resume { reason: WaitReason::Blocked });
            }
            return Ok(());
        }
        let markers = viz::project_robot(robot, &self.config.viz);
        let pos = robot.pose.position();
        let active = assess_block(markers.iter().filter(|m| !m.dimmed), pos, robot.plan().goal(), human, &ip);
        let original = robot
            .detour()
            .map(|ctx| assess_block(markers.iter().filter(|m| m.dimmed), pos, ctx.original.goal(), human, &ip));
        self.blocked = active.blocked;
        let action = self.state.arbiter.arbitrate(self.tick, &active, original.as_ref(), robot);
        let waiting = self.state.arbiter.waiting();
        match action {
            Action::Continue => {}
            Action::Detour => match self.build_detour(human) {
                Some((d, source)) => {
                    let (branch_point, rejoin_point) = (d.branch_point, d.rejoin_point);
                    self.state.robot.begin_detour(d, &self.config.motion)?;
                    if waiting {
                        ev.push(Event::Resume { reason: WaitReason::Blocked });
                    }
                    self.state.arbiter.commit(self.tick, Action::Detour, ip.latch_ticks);
                    ev.push(Event::Detour {
                        source,
                        branch_point,
                        rejoin_point,
                    });
                }
                None => {
                    if !waiting {
                        self.state.arbiter.commit(self.tick, Action::Wait, ip.latch_ticks);
                        ev.push(Event::Wait { reason: WaitReason::NoDetour });
                    }
                }
            },
            Action::Wait => {
                if !waiting {
                    self.state.arbiter.commit(self.tick, Action::Wait, ip.latch_ticks);
                    ev.push(Event::Wait { reason: WaitReason::Blocked });
                }
            }
            Action::Revert => {
                if let Some(progress) = self.state.robot.revert(&self.config.motion) {
                    self.state.arbiter.commit(self.tick, Action::Revert, ip.latch_ticks);
                    ev.push(Event::Revert { progress });
                }
            }
            Action::Resume => {
                self.state.arbiter.commit(self.tick, Action::Resume, ip.latch_ticks);
                ev.push(Event::Resume { reason: WaitReason::Blocked });
            }
        }
        Ok(())
    }

    /// The plan and progress a new detour is measured against.
    fn detour_base(&self) -> (&PathPlan, f64) {
        let robot = &self.state.robot;
        match (robot.detour(), robot.original_progress()) {
            (Some(ctx), Some(s)) => (&ctx.original, s),
            _ => (robot.plan(), robot.plan_progress()),
        }
    }

    fn build_detour(&self, human: Vec2) -> Option<(Detour, DetourSource)> {
        let (base, progress) = self.detour_base();
        let total = base.total_length();
        let pose = self.state.robot.pose;
        let rule = self.config.motion.junction_rule();
        if let Some(shift) = self.hallway_shift(human) {
            let (branch_point, rejoin_point) = divergence(base, progress, &shift.plan);
            if branch_point < total {
                return Some((
                    Detour {
                        plan: shift.plan,
                        branch_point,
                        rejoin_point,
                    },
                    DetourSource::LateralShift,
                ));
            }
        }
        let obstacle = DynamicObstacle {
            center: human,
            radius: self.config.interaction.detour_radius,
        };
        match planner::detour(&self.robot_grid, base, progress, &pose, obstacle, &rule) {
            Ok(d) if d.branch_point < total && !d.plan.is_empty() => Some((d, DetourSource::Planner)),
            _ => None,
        }
    }

    fn hallway_shift(&self, human: Vec2) -> Option<crate::scenario::LateralShift> {
        let ScenarioState::Hallway(h) = &self.state.scenario else {
            return None;
        };
        if self.state.task != Task::Scenario {
            return None;
        }
        let line = h.centerline()?;
        if line.b.distance(self.detour_base().0.goal()) > 1e-9 {
            return None;
        }
        lateral_shift(
            &self.robot_grid,
            &line,
            &self.state.robot.pose,
            human,
            self.config.hallway.shift_clearance,
            &self.config.motion.junction_rule(),
        )
    }

    /// Waypoint battery check before heading to `dest`. Returns true when
    /// the robot was sent to charge instead.
    fn waypoint_check(&mut self, dest: Vec2, ev: &mut Vec<Event>) -> Result<bool, Fault> {
        let batt = self.state.robot.battery;
        if batt.mode != BatteryMode::AtWaypointCheck {
            return Ok(false);
        }
        let pose = self.state.robot.pose;
        let mut end_heading = pose.heading();
        let check = batt.check_at_waypoint(pose.position(), dest, |from, to| {
            let start = if from == pose.position() {
                pose
            } else {
                Pose2D::at(from, end_heading)
            };
            let plan = self.plan_to(&start, to)?;
            if let Some(last) = plan.primitives().iter().rev().find(|p| !matches!(p, Primitive::Rotate(_))) {
                end_heading = last.end_heading();
            }
            Some(plan.total_length())
        });
        ev.push(Event::BatteryCheck {
            a: check.a,
            b: check.b,
            remaining: batt.remaining_range,
            decision: check.decision,
        });
        if check.stranded_risk && !self.state.stranded_risk {
            self.state.stranded_risk = true;
            ev.push(Event::StrandedRisk);
        }
        // A full battery at the dock cannot do better; go anyway.
        let full_at_base = self.at_base() && batt.remaining_range >= batt.capacity;
        if check.decision == BatteryDecision::GoCharge && !full_at_base {
            self.go_charge(ChargeTrigger::Waypoint, None, ev)?;
            return Ok(true);
        }
        Ok(false)
    }

    fn robot_free(&self) -> bool {
        self.state.robot.plan().is_empty() && !self.state.arbiter.waiting() && !self.state.robot.battery.stranded
    }

    fn arrived_at(&self, p: Vec2) -> bool {
        self.state.robot.pose.position().distance(p) <= self.config.motion.arrive_tolerance + 1e-9
    }

    fn scenario_tick(&mut self, ev: &mut Vec<Event>) -> Result<(), Fault> {
        if self.state.task == Task::ReturnToBase && self.state.robot.plan().is_empty() {
            if self.at_base() {
                self.state.task = Task::Charging;
                self.state.robot.battery.charging = true;
                ev.push(Event::ChargingStarted);
            } else {
                let pose = self.state.robot.pose;
                match self.plan_home(&pose) {
                    Some(p) => self.state.robot.set_plan(p, &self.config.motion)?,
                    None => {
                        self.state.task = Task::Scenario;
                        if !self.state.stranded_risk {
                            self.state.stranded_risk = true;
                            ev.push(Event::StrandedRisk);
                        }
                    }
                }
            }
        }
        match self.config.scenario {
            ScenarioKind::Hallway => self.hallway_tick(ev),
            ScenarioKind::Retrieval => self.retrieval_tick(ev),
            ScenarioKind::Tour => self.tour_tick(ev),
        }
    }

    fn set_leg_plan(&mut self, plan: Option<PathPlan>, ev: &mut Vec<Event>) -> Result<(), Fault> {
        match plan {
            Some(p) => self.state.robot.set_plan(p, &self.config.motion)?,
            None => {
                if !self.state.stranded_risk {
                    self.state.stranded_risk = true;
                    ev.push(Event::StrandedRisk);
                }
            }
        }
        Ok(())
    }

    fn hallway_tick(&mut self, ev: &mut Vec<Event>) -> Result<(), Fault> {
        let hp = self.config.hallway.clone();
        let human = self.state.human.as_ref().map(|h| h.pose.position());
        let ScenarioState::Hallway(h) = &mut self.state.scenario else {
            unreachable!()
        };
        if let Some(hpos) = human {
            for (k, o) in h.obstructions.iter_mut().enumerate() {
                if !o.removed && hpos.distance(h.rooms[o.room]) <= hp.room_radius {
                    o.removed = true;
                    ev.push(Event::ObstructionRemoved { index: k });
                }
            }
        }
        if self.state.task != Task::Scenario {
            return self.obstruction_wait(None, ev);
        }
        let Some(target) = h.target() else {
            self.state.task = Task::Done;
            return self.obstruction_wait(None, ev);
        };
        let center = h.rooms[target];
        let arrived = self.state.robot.plan().is_empty()
            && self.state.robot.pose.position().distance(center) <= self.config.motion.arrive_tolerance + 1e-9;
        if arrived {
            ev.push(Event::RoomReached { room: target });
            h.from = target;
            h.leg += 1;
            if h.leg >= h.itinerary.len() {
                self.state.task = Task::Done;
                return self.obstruction_wait(None, ev);
            }
        }
        let leg = h.leg;
        let line = h.centerline().expect("leg in range");
        let obstruction = h.obstructions.get(leg).copied();
        if self.robot_free() && !self.state.obstruction_hold {
            if self.waypoint_check(line.b, ev)? {
                return self.obstruction_wait(None, ev);
            }
            let pose = self.state.robot.pose;
            let plan = if self.robot_grid.segment_clear(pose.position(), line.b) {
                Some(plan_polyline(&self.robot_grid, &pose, &[line.b], &self.config.motion.junction_rule()))
            } else {
                self.plan_to(&pose, line.b)
            };
            self.set_leg_plan(plan, ev)?;
        }
        if let Some(hpos) = human {
            let robot = &self.state.robot;
            let shift_ok = robot.detour().is_none()
                && !robot.plan().is_empty()
                && !self.state.arbiter.waiting()
                && !self.state.arbiter.latched(self.tick)
                && blocks_centerline(
                    &line,
                    robot.pose.position(),
                    hpos,
                    self.config.interaction.block_radius,
                    hp.min_ahead,
                    hp.lookahead,
                );
            if shift_ok {
                if let Some(shift) = self.hallway_shift(hpos) {
                    let (branch_point, rejoin_point) =
                        divergence(self.state.robot.plan(), self.state.robot.plan_progress(), &shift.plan);
                    if branch_point < self.state.robot.plan().total_length() {
                        self.state.robot.begin_detour(
                            Detour {
                                plan: shift.plan,
                                branch_point,
                                rejoin_point,
                            },
                            &self.config.motion,
                        )?;
                        self.state
                            .arbiter
                            .commit(self.tick, Action::Detour, self.config.interaction.latch_ticks);
                        ev.push(Event::Detour {
                            source: DetourSource::LateralShift,
                            branch_point,
                            rejoin_point,
                        });
                    }
                }
            }
        }
        self.obstruction_wait(obstruction, ev)
    }

    fn obstruction_wait(&mut self, obstruction: Option<Obstruction>, ev: &mut Vec<Event>) -> Result<(), Fault> {
        let stop = self.config.hallway.obstruction_stop;
        let hold = self.state.task == Task::Scenario
            && obstruction.is_some_and(|o| !o.removed && self.state.robot.pose.position().distance(o.point) <= stop);
        if hold != self.state.obstruction_hold {
            self.state.obstruction_hold = hold;
            ev.push(if hold {
                Event::Wait {
                    reason: WaitReason::Obstruction,
                }
            } else {
                Event::Resume {
                    reason: WaitReason::Obstruction,
                }
            });
        }
        Ok(())
    }

    fn retrieval_tick(&mut self, ev: &mut Vec<Event>) -> Result<(), Fault> {
        let human = self.state.human.as_ref().map(|h| h.pose.position());
        let ScenarioState::Retrieval(r) = &mut self.state.scenario else {
            unreachable!()
        };
        if let Some(hpos) = human {
            let dwell = r.dwell_ticks;
            for gem in human_dwell_tick(&mut r.gems, hpos, dwell) {
                ev.push(Event::GemCollected {
                    gem,
                    collector: Owner::Human,
                });
            }
        }
        if self.state.task != Task::Scenario {
            return Ok(());
        }
        if let Some(id) = r.target {
            let g = r.gems.iter().position(|g| g.id == id).expect("target gem exists");
            let pos = r.gems[g].position;
            let plan_empty = self.state.robot.plan().is_empty();
            if plan_empty && self.arrived_at(pos) {
                let ScenarioState::Retrieval(r) = &mut self.state.scenario else {
                    unreachable!()
                };
                r.gems[g].collected = true;
                r.target = None;
                ev.push(Event::GemCollected {
                    gem: id,
                    collector: Owner::Robot,
                });
            } else if plan_empty && self.robot_free() {
                let pose = self.state.robot.pose;
                let plan = self.plan_to(&pose, pos);
                self.set_leg_plan(plan, ev)?;
            }
        }
        let ScenarioState::Retrieval(r) = &self.state.scenario else {
            unreachable!()
        };
        if r.target.is_none() && self.robot_free() {
            let pose = self.state.robot.pose;
            let skip = r.unreachable.clone();
            // Plans for the reachable candidates, in id order.
            let mut plans: Vec<PathPlan> = Vec::new();
            let sel = select_gem(&r.gems, &skip, |p| {
                let plan = self.plan_to(&pose, p)?;
                let len = plan.total_length();
                plans.push(plan);
                Some(len)
            });
            let candidates: Vec<u8> = {
                let mut ids: Vec<&Gem> = r
                    .gems
                    .iter()
                    .filter(|g| g.owner == Owner::Robot && !g.collected && !skip.contains(&g.id))
                    .collect();
                ids.sort_by_key(|g| g.id);
                ids.into_iter()
                    .map(|g| g.id)
                    .filter(|id| !sel.unreachable.contains(id))
                    .collect()
            };
            for &gem in &sel.unreachable {
                ev.push(Event::GemUnreachable { gem });
            }
            let ScenarioState::Retrieval(r) = &mut self.state.scenario else {
                unreachable!()
            };
            r.unreachable.extend(sel.unreachable.iter().copied());
            if let Some(id) = sel.chosen {
                let k = candidates.iter().position(|&c| c == id).expect("chosen gem is a candidate");
                let plan = plans.swap_remove(k);
                let dest = plan.goal();
                if !self.waypoint_check(dest, ev)? {
                    self.state.robot.set_plan(plan, &self.config.motion)?;
                    if let ScenarioState::Retrieval(r) = &mut self.state.scenario {
                        r.target = Some(id);
                    }
                }
            }
        }
        let ScenarioState::Retrieval(r) = &self.state.scenario else {
            unreachable!()
        };
        let robot_done = r
            .gems
            .iter()
            .all(|g| g.owner != Owner::Robot || g.collected || r.unreachable.contains(&g.id));
        if all_collected(&r.gems) || (robot_done && human.is_none()) {
            self.state.task = Task::Done;
        }
        Ok(())
    }

    fn tour_tick(&mut self, ev: &mut Vec<Event>) -> Result<(), Fault> {
        if self.state.task != Task::Scenario {
            return Ok(());
        }
        let ScenarioState::Tour(t) = &mut self.state.scenario else {
            unreachable!()
        };
        let Some(&wp) = t.waypoints.get(t.next) else {
            self.state.task = Task::Done;
            return Ok(());
        };
        let arrived = self.state.robot.plan().is_empty()
            && self.state.robot.pose.position().distance(wp) <= self.config.motion.arrive_tolerance + 1e-9;
        if arrived {
            t.next += 1;
            ev.push(Event::RoomReached { room: t.next - 1 });
            if t.next >= t.waypoints.len() {
                self.state.task = Task::Done;
                return Ok(());
            }
        }
        let ScenarioState::Tour(t) = &self.state.scenario else {
            unreachable!()
        };
        let wp = t.waypoints[t.next];
        if self.robot_free() {
            if self.waypoint_check(wp, ev)? {
                return Ok(());
            }
            let pose = self.state.robot.pose;
            let plan = self.plan_to(&pose, wp);
            self.set_leg_plan(plan, ev)?;
        }
        Ok(())
    }

    fn motion(&mut self, ev: &mut Vec<Event>) {
        let params = self.config.motion;
        let dt = self.config.dt;
        let before = self.state.mode;
        let hold = if self.state.task == Task::Charging {
            Hold::Charging
        } else if self.state.robot.battery.stranded || self.state.arbiter.waiting() || self.state.obstruction_hold {
            Hold::Waiting
        } else {
            Hold::None
        };
        self.state.robot.hold = hold;
        let mut completed = false;
        let mut safety = false;
        if hold == Hold::None && !self.state.robot.plan().is_empty() {
            completed = self.state.robot.settle(&params);
            if !completed {
                if let Some(h) = &self.state.human {
                    let mode = select_mode(&self.state.robot, &params);
                    if matches!(mode, Mode::Forward | Mode::ArcPursuit)
                        && translation_unsafe(
                            &self.state.robot.pose,
                            params.v_max * dt,
                            h.pose.position(),
                            &self.config.interaction,
                        )
                    {
                        safety = true;
                        self.state.robot.hold = Hold::Waiting;
                    }
                }
            }
        }
        if safety != self.state.safety_hold {
            self.state.safety_hold = safety;
            ev.push(if safety {
                Event::Wait { reason: WaitReason::Safety }
            } else {
                Event::Resume { reason: WaitReason::Safety }
            });
        }
        let budget = self.state.robot.battery.range_budget();
        let report = self.state.robot.step(&params, dt, budget);
        if completed || report.plan_completed {
            ev.push(Event::GoalReached);
        }
        let at_base = self.at_base();
        if self.state.robot.battery.drain(report.translated, at_base) {
            ev.push(Event::Stranded);
        }
        self.translated = report.translated;
        if self.state.task == Task::Charging {
            let rate = self.config.battery.params.charge_rate;
            if self.state.robot.battery.charge_tick(at_base, rate, dt) {
                self.state.robot.battery.charging = false;
                self.state.task = Task::Scenario;
                self.state.robot.hold = Hold::None;
                self.state.robot.mode = select_mode(&self.state.robot, &params);
                ev.push(Event::ChargeComplete);
            }
        }
        let after = self.state.robot.mode;
        if after != before {
            ev.push(Event::ModeChange { from: before, to: after });
        }
        self.state.mode = after;
    }

    fn compose_message(&self) -> String {
        let s = &self.state;
        if s.robot.battery.stranded {
            return "Battery depleted".into();
        }
        match s.task {
            Task::Charging => return "Charging".into(),
            Task::ReturnToBase => return "Returning to charge".into(),
            Task::Done => return "Done".into(),
            Task::Scenario => {}
        }
        if s.obstruction_hold {
            return "Waiting for the obstruction to be cleared".into();
        }
        if s.arbiter.waiting() || s.safety_hold {
            return "Waiting for you to move".into();
        }
        match &s.scenario {
            ScenarioState::Hallway(h) => match h.target() {
                Some(t) => format!("Going to room {}", t + 1),
                None => "Done".into(),
            },
            ScenarioState::Retrieval(r) => match r.target {
                Some(id) => format!("Collecting gem {id}"),
                None => "Choosing a gem".into(),
            },
            ScenarioState::Tour(t) => format!("Going to waypoint {}", t.next + 1),
        }
    }

    /// 64-bit digest of the simulation state, excluding the tick counter
    /// and everything derived for display.
    pub fn state_hash(&self) -> u64 {
        state_hash(&self.state)
    }
}

struct StateHasher(Sha256);

impl StateHasher {
    fn u8(&mut self, v: u8) {
        self.0.update([v]);
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn u64(&mut self, v: u64) {
        self.0.update(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.update(v.to_bits().to_le_bytes());
    }
    fn vec2(&mut self, v: Vec2) {
        self.f64(v.x);
        self.f64(v.y);
    }
    fn pose(&mut self, p: &Pose2D) {
        self.f64(p.x);
        self.f64(p.y);
        self.f64(p.heading());
    }
    fn plan(&mut self, plan: &PathPlan) {
        self.u64(plan.primitives().len() as u64);
        for p in plan.primitives() {
            match p {
                Primitive::Rotate(r) => {
                    self.u8(0);
                    self.vec2(r.at);
                    self.f64(r.from_heading);
                    self.f64(r.delta);
                }
                Primitive::Line(l) => {
                    self.u8(1);
                    self.vec2(l.start);
                    self.vec2(l.end);
                }
                Primitive::Arc(a) => {
                    self.u8(2);
                    self.vec2(a.center);
                    self.f64(a.radius);
                    self.f64(a.start_angle);
                    self.f64(a.sweep);
                }
            }
        }
        self.vec2(plan.goal());
    }
}

pub fn state_hash(s: &SimState) -> u64 {
    let mut h = StateHasher(Sha256::new());
    let r = &s.robot;
    h.pose(&r.pose);
    h.u8(r.mode.code());
    h.u8(r.hold as u8);
    h.plan(r.plan());
    h.f64(r.plan_progress());
    h.u64(r.primitive_index() as u64);
    h.bool(r.rotate_latched());
    match r.detour() {
        Some(ctx) => {
            h.u8(1);
            h.plan(&ctx.original);
            h.f64(ctx.origin_progress);
            h.f64(ctx.branch_point);
            h.f64(ctx.rejoin_point);
        }
        None => h.u8(0),
    }
    let b = &r.battery;
    h.f64(b.remaining_range);
    h.f64(b.capacity);
    h.u8(b.mode.code());
    h.vec2(b.base);
    h.bool(b.charging);
    h.bool(b.stranded);
    match &s.human {
        Some(hu) => {
            h.u8(1);
            h.pose(&hu.pose);
            h.vec2(hu.input);
            h.f64(hu.radius);
            h.f64(hu.speed);
        }
        None => h.u8(0),
    }
    h.u64(s.arbiter.latched_until());
    h.bool(s.arbiter.waiting());
    h.u8(s.task.code());
    h.vec2(s.input);
    h.bool(s.safety_hold);
    h.bool(s.obstruction_hold);
    h.bool(s.stranded_risk);
    h.u8(s.mode.code());
    match &s.scenario {
        ScenarioState::Hallway(hw) => {
            h.u8(0);
            h.u64(hw.rooms.len() as u64);
            for &p in &hw.rooms {
                h.vec2(p);
            }
            h.u64(hw.itinerary.len() as u64);
            for &i in &hw.itinerary {
                h.u64(i as u64);
            }
            h.u64(hw.leg as u64);
            h.u64(hw.from as u64);
            h.u64(hw.obstructions.len() as u64);
            for o in &hw.obstructions {
                h.vec2(o.point);
                h.u64(o.room as u64);
                h.bool(o.removed);
            }
        }
        ScenarioState::Retrieval(rt) => {
            h.u8(1);
            h.u64(rt.gems.len() as u64);
            for g in &rt.gems {
                h.u8(g.id);
                h.vec2(g.position);
                h.u8(g.owner as u8);
                h.bool(g.collected);
                h.f64(g.collect_radius);
                h.u64(g.dwell_ticks);
            }
            match rt.target {
                Some(t) => {
                    h.u8(1);
                    h.u8(t);
                }
                None => h.u8(0),
            }
            h.u64(rt.unreachable.len() as u64);
            for &u in &rt.unreachable {
                h.u8(u);
            }
            h.u64(rt.dwell_ticks);
        }
        ScenarioState::Tour(t) => {
            h.u8(2);
            h.u64(t.waypoints.len() as u64);
            for &p in &t.waypoints {
                h.vec2(p);
            }
            h.u64(t.next as u64);
        }
    }
    let d = h.0.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("config hash {given} does not match the log header ({logged})")]
    ConfigMismatch { given: String, logged: String },
    #[error("map hash {given} does not match the log header ({logged})")]
    MapMismatch { given: String, logged: String },
    #[error(transparent)]
    Setup(#[from] SessionError),
    #[error("replay diverged at tick {tick} (record {index})")]
    Divergence {
        tick: u64,
        index: usize,
        expected: String,
        actual: String,
    },
}

/// Re-simulates a recorded trial. The emitted log must match `log` byte for
/// byte; the first mismatch is reported with its tick.
pub fn replay(log: &TrialLog, config: Option<&SimConfig>) -> Result<TrialLog, ReplayError> {
    let header = &log.header;
    let config = match config {
        Some(c) => {
            let given = c.hash();
            if given != header.config_hash {
                return Err(ReplayError::ConfigMismatch {
                    given,
                    logged: header.config_hash.clone(),
                });
            }
            c.clone()
        }
        None => header.config.clone(),
    };
    if config.hash() != header.config_hash {
        return Err(ReplayError::ConfigMismatch {
            given: config.hash(),
            logged: header.config_hash.clone(),
        });
    }
    let map = MapFile::parse(&header.map).map_err(|e| {
        SessionError::Config(ConfigError::Map {
            path: "<log header>".into(),
            source: e,
        })
    })?;
    if map.digest() != header.map_hash {
        return Err(ReplayError::MapMismatch {
            given: map.digest(),
            logged: header.map_hash.clone(),
        });
    }
    // Only inputs, stale notices and the end record drive the replay; each
    // line is parsed on its own so a corrupted record shows up as a
    // divergence at its tick rather than as a parse failure.
    let mut drivers: Vec<(usize, Option<Record>)> = Vec::with_capacity(log.lines.len());
    for (i, l) in log.lines.iter().enumerate() {
        drivers.push((i, serde_json::from_str::<Record>(l).ok()));
    }
    let end = log.end();
    let mut session = Session::with_map(config, map)?;
    let mut compared = 0usize;
    let mut cursor = 0usize;
    let mismatch = |session: &Session, index: usize| -> ReplayError {
        let expected = log.lines.get(index).cloned().unwrap_or_default();
        let actual = session.log.lines.get(index).cloned().unwrap_or_default();
        let tick = drivers
            .get(index)
            .and_then(|(_, r)| r.as_ref().map(Record::tick))
            .or_else(|| {
                session.log.lines.get(index).and_then(|l| serde_json::from_str::<Record>(l).ok().map(|r| r.tick()))
            })
            .unwrap_or(session.tick);
        ReplayError::Divergence {
            tick,
            index,
            expected,
            actual,
        }
    };
    while !session.is_ended() {
        let next = session.tick + 1;
        while cursor < drivers.len() {
            let Some(rec) = &drivers[cursor].1 else {
                cursor += 1;
                continue;
            };
            if rec.tick() > next {
                break;
            }
            if rec.tick() == next {
                match rec {
                    Record::Input { movement, .. } => session.buffer_logged_input(Vec2::new(movement[0], movement[1])),
                    Record::Event {
                        event: Event::StaleInput { claimed_tick },
                        ..
                    } => session.note_stale(*claimed_tick),
                    _ => {}
                }
            }
            cursor += 1;
        }
        if let Some((end_tick, reason)) = end {
            if session.tick == end_tick {
                session.end(reason);
                break;
            }
        }
        session.tick();
        while compared < session.log.lines.len() {
            if log.lines.get(compared) != Some(&session.log.lines[compared]) {
                return Err(mismatch(&session, compared));
            }
            compared += 1;
        }
        if session.tick > log.header.config.tick_budget.saturating_add(1) {
            break;
        }
    }
    while compared < session.log.lines.len() {
        if log.lines.get(compared) != Some(&session.log.lines[compared]) {
            return Err(mismatch(&session, compared));
        }
        compared += 1;
    }
    if compared != log.lines.len() {
        return Err(mismatch(&session, compared));
    }
    Ok(session.log)
}
