//! Acceptance suite: one line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p haven-core --test acceptance`.

use std::f64::consts::{FRAC_PI_3, PI, SQRT_2};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use haven_core::battery::{BatteryDecision, BatteryMode, BatteryState};
use haven_core::config::{PolicyConfig, ScenarioKind, SimConfig};
use haven_core::engine::{replay, state_hash, ScenarioState, Session};
use haven_core::geometry::{ArcPrimitive, LinePrimitive, Pose2D, Primitive, RotatePrimitive, Vec2};
use haven_core::log::{ChargeTrigger, EndReason, Event, Record, TrialLog};
use haven_core::metrics::finalize_metrics;
use haven_core::motion::{select_mode, Mode, MotionParams, RobotState};
use haven_core::planner::{astar, plan_detailed, plan_with, MapFile, NavGrid, PathPlan, PlanOptions};
use haven_core::policy::{run_trial, HumanPolicy};
use haven_core::scenario::Owner;
use haven_core::viz::{project_path, thought_bubble, TurnSignal};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--digests") {
        for cfg in determinism_configs() {
            let (log, _) = run_trial(&cfg).expect("trial runs");
            println!("{}", log.digest());
        }
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, Option<Duration>, fn() -> Check); 7] = [
        ("controller fidelity", Some(Duration::from_secs(10)), controller_fidelity),
        ("planner optimality", Some(Duration::from_secs(20)), planner_optimality),
        ("battery policies", Some(Duration::from_secs(60)), battery_policies),
        ("interaction protocol", Some(Duration::from_secs(120)), interaction_protocol),
        ("scenario completion", Some(Duration::from_secs(120)), scenario_completion),
        ("determinism", None, determinism),
        ("visualization semantics", None, visualization_semantics),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, limit, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|w| name.contains(w.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), l.as_secs())),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS  {name:<24} {:>7.2}s  {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<24} {:>7.2}s  {detail}", elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// Independent oracles

/// Angle in (-π, π].
fn wrap(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

fn bearing_error(pose: &Pose2D, target: Vec2) -> (f64, f64) {
    let dx = target.x - pose.x;
    let dy = target.y - pose.y;
    (wrap(dy.atan2(dx) - pose.heading()), dx.hypot(dy))
}

fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
    };
    (p.x - a.x - t * abx).hypot(p.y - a.y - t * aby)
}

fn arc_distance(p: Vec2, arc: &ArcPrimitive) -> f64 {
    let (rx, ry) = (p.x - arc.center.x, p.y - arc.center.y);
    let theta = ry.atan2(rx);
    let rel = if arc.sweep >= 0.0 {
        (theta - arc.start_angle).rem_euclid(2.0 * PI)
    } else {
        (arc.start_angle - theta).rem_euclid(2.0 * PI)
    };
    if rel <= arc.sweep.abs() + 1e-12 {
        (rx.hypot(ry) - arc.radius).abs()
    } else {
        let end = arc.start_angle + arc.sweep;
        let a = Vec2::new(arc.center.x + arc.radius * arc.start_angle.cos(), arc.center.y + arc.radius * arc.start_angle.sin());
        let b = Vec2::new(arc.center.x + arc.radius * end.cos(), arc.center.y + arc.radius * end.sin());
        p.distance(a).min(p.distance(b))
    }
}

fn primitive_distance(p: Vec2, prim: &Primitive) -> f64 {
    match prim {
        Primitive::Rotate(r) => p.distance(r.at),
        Primitive::Line(l) => segment_distance(p, l.start, l.end),
        Primitive::Arc(a) => arc_distance(p, a),
    }
}

fn plan_distance(p: Vec2, plan: &PathPlan) -> f64 {
    plan.primitives()
        .iter()
        .map(|q| primitive_distance(p, q))
        .fold(f64::INFINITY, f64::min)
}

/// Dijkstra over move counts with simple linear-scan extraction.
fn dijkstra(grid: &NavGrid, start: (usize, usize), goal: (usize, usize)) -> Option<(u32, u32)> {
    let (w, h) = (grid.width(), grid.height());
    let free = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < w && (j as usize) < h && !grid.is_blocked(i as usize, j as usize);
    let value = |c: (u32, u32)| c.0 as f64 + c.1 as f64 * SQRT_2;
    let mut dist: Vec<Option<(u32, u32)>> = vec![None; w * h];
    let mut done = vec![false; w * h];
    dist[start.1 * w + start.0] = Some((0, 0));
    loop {
        let mut best: Option<(usize, (u32, u32))> = None;
        for (k, d) in dist.iter().enumerate() {
            if let (Some(d), false) = (d, done[k]) {
                if best.is_none_or(|(_, b)| value(*d) < value(b)) {
                    best = Some((k, *d));
                }
            }
        }
        let (k, d) = best?;
        let (i, j) = ((k % w) as isize, (k / w) as isize);
        if (i as usize, j as usize) == goal {
            return Some(d);
        }
        done[k] = true;
        for di in -1..=1isize {
            for dj in -1..=1isize {
                if (di, dj) == (0, 0) || !free(i + di, j + dj) {
                    continue;
                }
                let diagonal = di != 0 && dj != 0;
                if diagonal && !(free(i + di, j) && free(i, j + dj)) {
                    continue;
                }
                let n = (j + dj) as usize * w + (i + di) as usize;
                let cand = if diagonal { (d.0, d.1 + 1) } else { (d.0 + 1, d.1) };
                if !done[n] && dist[n].is_none_or(|old| value(cand) < value(old)) {
                    dist[n] = Some(cand);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Controller

fn controller_fidelity() -> Check {
    let params = MotionParams::default();
    let dt = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0_17);
    let mut seen = [0usize; 3];
    let mut near_rotations = 0;
    let mut worst_ratio: f64 = 0.0;
    for trial in 0..1000 {
        let pose = Pose2D::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-PI..PI));
        let d0 = rng.random_range(0.5..10.0);
        let bearing: f64 = rng.random_range(-PI..PI);
        let target = Vec2::new(pose.x + d0 * bearing.cos(), pose.y + d0 * bearing.sin());
        let mut robot = RobotState::new(pose, BatteryState::disabled());
        let plan = PathPlan::from_primitives(vec![Primitive::Line(LinePrimitive { start: pose.position(), end: target })], target);
        robot.set_plan(plan, &params).map_err(|e| format!("trial {trial}: {e}"))?;
        let bound = ((d0 * 3.0 / params.v_max + 2.0 * PI / params.omega_max) / dt).ceil() as u64;
        let mut latched = false;
        let mut prev_arc_alpha: Option<f64> = None;
        let mut ticks = 0;
        while !robot.plan().is_empty() {
            ensure!(ticks < bound, "trial {trial}: not arrived after {bound} ticks (d = {d0})");
            let (alpha, d) = bearing_error(&robot.pose, target);
            let arriving = d <= params.arrive_tolerance;
            let expected = if arriving {
                Mode::Idle
            } else if latched {
                if alpha.abs() > 1e-9 {
                    Mode::RotateInPlace
                } else {
                    Mode::Forward
                }
            } else if alpha.abs() > FRAC_PI_3 || d < 0.3 {
                Mode::RotateInPlace
            } else if alpha.abs() > params.signal_epsilon {
                Mode::ArcPursuit
            } else {
                Mode::Forward
            };
            if !arriving {
                let got = select_mode(&robot, &params);
                ensure!(
                    got == expected,
                    "trial {trial} tick {ticks}: alpha {alpha:.6} d {d:.4} latched {latched}: mode {got:?}, expected {expected:?}"
                );
            }
            let before = robot.pose;
            let report = robot.step(&params, dt, f64::INFINITY);
            ensure!(report.translated <= params.v_max * dt + 1e-12, "trial {trial}: translated {}", report.translated);
            ensure!(report.rotated.abs() <= params.omega_max * dt + 1e-12, "trial {trial}: rotated {}", report.rotated);
            let moved = before.position().distance(robot.pose.position());
            ensure!(moved <= params.v_max * dt + 1e-12, "trial {trial}: moved {moved}");
            match expected {
                Mode::Idle => ensure!(robot.plan().is_empty(), "trial {trial}: within tolerance but plan kept"),
                Mode::RotateInPlace => {
                    seen[0] += 1;
                    if alpha.abs() <= FRAC_PI_3 {
                        near_rotations += 1;
                    }
                    latched = true;
                    ensure!(
                        before.x.to_bits() == robot.pose.x.to_bits() && before.y.to_bits() == robot.pose.y.to_bits(),
                        "trial {trial}: position changed while rotating"
                    );
                }
                Mode::ArcPursuit => seen[1] += 1,
                _ => seen[2] += 1,
            }
            if expected == Mode::ArcPursuit && !robot.plan().is_empty() {
                let (after, _) = bearing_error(&robot.pose, target);
                if let Some(prev) = prev_arc_alpha {
                    ensure!(alpha.abs() <= prev + 1e-9, "trial {trial}: |alpha| grew {prev} -> {}", alpha.abs());
                }
                ensure!(after.abs() <= alpha.abs() + 1e-9, "trial {trial}: |alpha| grew {} -> {}", alpha.abs(), after.abs());
                prev_arc_alpha = Some(after.abs());
            } else {
                prev_arc_alpha = None;
            }
            ticks += 1;
        }
        let miss = robot.pose.position().distance(target);
        ensure!(miss <= params.arrive_tolerance + 1e-9, "trial {trial}: stopped {miss} from target");
        worst_ratio = worst_ratio.max(ticks as f64 / bound as f64);
    }
    ensure!(seen.iter().all(|&n| n > 0), "modes not all exercised: {seen:?}");
    ensure!(near_rotations > 0, "near-distance rotation never exercised");
    Ok(format!(
        "1000 pairs; rotate/arc/forward ticks {seen:?}; near-distance rotations {near_rotations}; worst arrival {:.0}% of bound",
        worst_ratio * 100.0
    ))
}

// ---------------------------------------------------------------------------
// Planner

fn planner_optimality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x91a7);
    let mut queries = 0;
    let mut unreachable = 0;
    let mut samples = 0usize;
    for g in 0..200 {
        let density = g as f64 / 199.0 * 0.4;
        let blocked: Vec<bool> = (0..400).map(|_| rng.random_bool(density)).collect();
        let inflation = if g % 3 == 0 { 0.1 } else { 0.0 };
        let grid = NavGrid::new(20, 20, 0.1, blocked, inflation).map_err(|e| e.to_string())?;
        let free: Vec<(usize, usize)> = (0..400)
            .map(|k| (k % 20, k / 20))
            .filter(|&(i, j)| !grid.is_blocked(i, j))
            .collect();
        if free.len() < 2 {
            continue;
        }
        for _ in 0..5 {
            let s = free[rng.random_range(0..free.len())];
            let t = free[rng.random_range(0..free.len())];
            if s == t {
                continue;
            }
            queries += 1;
            let oracle = dijkstra(&grid, s, t);
            let got = astar(&grid, grid.index(s.0, s.1), grid.index(t.0, t.1));
            match (oracle, &got) {
                (None, None) => {
                    unreachable += 1;
                    continue;
                }
                (Some(o), Some((cells, cost))) => {
                    ensure!(
                        (cost.straight, cost.diagonal) == o,
                        "grid {g} {s:?}->{t:?}: A* {cost:?}, oracle {o:?}"
                    );
                    ensure!(cells.first() == Some(&grid.index(s.0, s.1)) && cells.last() == Some(&grid.index(t.0, t.1)), "grid {g}: path endpoints");
                }
                _ => return Err(format!("grid {g} {s:?}->{t:?}: reachability differs (oracle {oracle:?})")),
            }
            let start = Pose2D::at(grid.cell_center(s.0, s.1), rng.random_range(-PI..PI));
            let goal = grid.cell_center(t.0, t.1);
            let report = plan_detailed(&grid, &start, goal, &[], &PlanOptions::default()).map_err(|e| format!("grid {g}: {e}"))?;
            ensure!(
                (report.cost.straight, report.cost.diagonal) == oracle.unwrap(),
                "grid {g}: plan cost differs from oracle"
            );
            ensure!(
                report.smoothed_length() <= report.raw_length() + 1e-9,
                "grid {g}: smoothed {} > raw {}",
                report.smoothed_length(),
                report.raw_length()
            );
            let plan = &report.plan;
            let total = plan.total_length();
            ensure!(plan.goal().distance(goal) < 1e-9, "grid {g}: plan goal moved");
            let mut s_at: f64 = 0.0;
            loop {
                let p = plan.point_at(s_at.min(total)).ok_or(format!("grid {g}: no point at {s_at}"))?;
                ensure!(!grid.point_blocked(p), "grid {g} {s:?}->{t:?}: sample at s={s_at:.2} ({:.3},{:.3}) is blocked", p.x, p.y);
                samples += 1;
                if s_at >= total {
                    break;
                }
                s_at += 0.05;
            }
            let again = plan_detailed(&grid, &start, goal, &[], &PlanOptions::default()).map_err(|e| e.to_string())?;
            ensure!(again.plan == report.plan, "grid {g}: planning is not deterministic");
        }
    }
    Ok(format!("{queries} queries on 200 grids ({unreachable} unreachable), exact cost match; {samples} samples collision-free"))
}

// ---------------------------------------------------------------------------
// Battery

fn relaxed(cfg: &SimConfig) -> PlanOptions {
    PlanOptions::relaxed(cfg.motion.junction_rule())
}

fn plan_len(grid: &NavGrid, cfg: &SimConfig, from: Pose2D, to: Vec2) -> Option<f64> {
    plan_with(grid, &from, to, &[], &relaxed(cfg)).ok().map(|p| p.total_length())
}

fn random_free_point(rng: &mut ChaCha8Rng, grid: &NavGrid, margin: f64) -> Vec2 {
    let (w, h) = (grid.width() as f64 * grid.resolution(), grid.height() as f64 * grid.resolution());
    loop {
        let p = Vec2::new(rng.random_range(margin..w - margin), rng.random_range(margin..h - margin));
        let clear = [(0.0, 0.0), (0.15, 0.0), (-0.15, 0.0), (0.0, 0.15), (0.0, -0.15)]
            .iter()
            .all(|&(dx, dy)| !grid.point_blocked(Vec2::new(p.x + dx, p.y + dy)));
        if clear {
            return p;
        }
    }
}

struct TourRun {
    log: TrialLog,
    records: Vec<Record>,
}

fn run_tour(cfg: SimConfig, map: Option<MapFile>) -> Result<TourRun, String> {
    let mut session = match map {
        Some(m) => Session::with_map(cfg, m),
        None => Session::new(cfg),
    }
    .map_err(|e| e.to_string())?;
    while !session.is_ended() {
        session.tick();
    }
    let log = session.into_log();
    let records = log.records().map_err(|e| e.to_string())?;
    Ok(TourRun { log, records })
}

fn snapshots(records: &[Record]) -> impl Iterator<Item = (u64, [f64; 3], f64, f64, Mode)> + '_ {
    records.iter().filter_map(|r| match r {
        Record::Snapshot {
            tick,
            robot,
            battery,
            translated,
            mode,
            ..
        } => Some((*tick, *robot, *battery, *translated, *mode)),
        _ => None,
    })
}

fn events(records: &[Record]) -> impl Iterator<Item = (u64, &Event)> + '_ {
    records.iter().filter_map(|r| match r {
        Record::Event { tick, event } => Some((*tick, event)),
        _ => None,
    })
}

/// Per-tick drain matches translated distance, summed over the trial.
fn check_drain(records: &[Record], initial: f64) -> Result<(), String> {
    let mut prev = initial;
    let mut drained = 0.0;
    let mut translated = 0.0;
    for (tick, _, battery, moved, _) in snapshots(records) {
        if moved > 0.0 {
            drained += prev - battery;
            translated += moved;
        } else {
            ensure!(battery >= prev, "tick {tick}: battery fell without translation");
        }
        prev = battery;
    }
    ensure!((drained - translated).abs() <= 1e-9, "drain {drained} vs translated {translated}");
    Ok(())
}

fn battery_policies() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xba77);

    // Checks on arrival at each waypoint.
    let base_cfg = SimConfig::for_scenario(ScenarioKind::Tour);
    let map = base_cfg.load_map().map_err(|e| e.to_string())?;
    let grid = map.nav_grid(base_cfg.planner.inflation_radius);
    let base = map.base.ok_or("tour map has no base")?;
    let mut checks = 0;
    let mut go_charge = 0;
    for it in 0..100 {
        let n = rng.random_range(3..7);
        let points: Vec<Vec2> = (0..n).map(|_| random_free_point(&mut rng, &grid, 0.4)).collect();
        let mut worst: f64 = 0.0;
        let mut from = base;
        let base_pose = |p: Vec2| Pose2D::at(p, 0.0);
        for &p in &points {
            let back = plan_len(&grid, &base_cfg, base_pose(p), base).ok_or(format!("itinerary {it}: unreachable point"))?;
            let a = plan_len(&grid, &base_cfg, base_pose(from), p).ok_or(format!("itinerary {it}: unreachable leg"))?;
            let fresh = plan_len(&grid, &base_cfg, base_pose(base), p).ok_or(format!("itinerary {it}: unreachable from base"))?;
            worst = worst.max(a + back).max(fresh + back);
            from = p;
        }
        let mut cfg = base_cfg.clone();
        cfg.seed = it;
        cfg.battery.mode = BatteryMode::AtWaypointCheck;
        cfg.battery.params.capacity = worst * rng.random_range(1.0..1.6);
        let initial = cfg.battery.params.capacity * rng.random_range(0.2..1.0);
        cfg.battery.params.initial_range = Some(initial);
        cfg.tour.waypoints = points.iter().map(|p| [p.x, p.y]).collect();
        cfg.tick_budget = 30_000;
        let run = run_tour(cfg.clone(), None).map_err(|e| format!("itinerary {it}: {e}"))?;
        let mut reached = 0usize;
        let mut last_pose: Option<[f64; 3]> = None;
        let mut pending: Option<(u64, BatteryDecision)> = None;
        for r in &run.records {
            match r {
                Record::Snapshot { robot, .. } => last_pose = Some(*robot),
                Record::Event { tick, event } => match event {
                    Event::RoomReached { .. } => reached += 1,
                    Event::BatteryCheck { a, b, remaining, decision } => {
                        checks += 1;
                        let (Some(a), Some(b)) = (a, b) else {
                            return Err(format!("itinerary {it} tick {tick}: check without distances"));
                        };
                        let should = a + b > *remaining;
                        ensure!(
                            should == (*decision == BatteryDecision::GoCharge),
                            "itinerary {it} tick {tick}: a {a} + b {b} vs remaining {remaining} decided {decision:?}"
                        );
                        let dest = points[reached];
                        if let Some(pose) = last_pose {
                            let oracle = plan_len(&grid, &cfg, Pose2D::new(pose[0], pose[1], pose[2]), dest)
                                .ok_or(format!("itinerary {it}: oracle plan failed"))?;
                            ensure!((oracle - a).abs() <= 1e-9, "itinerary {it} tick {tick}: a {a}, planned {oracle}");
                        }
                        ensure!(*b + 1e-9 >= dest.distance(base), "itinerary {it}: b below straight-line distance");
                        pending = Some((*tick, *decision));
                    }
                    Event::GoCharge { trigger, .. } => {
                        go_charge += 1;
                        ensure!(*trigger == ChargeTrigger::Waypoint, "itinerary {it}: unexpected {trigger:?} trigger");
                        ensure!(
                            pending == Some((*tick, BatteryDecision::GoCharge)),
                            "itinerary {it} tick {tick}: GoCharge without a failing check"
                        );
                    }
                    Event::Stranded => return Err(format!("itinerary {it}: stranded at tick {tick} with legs within capacity")),
                    _ => {}
                },
                _ => {}
            }
        }
        ensure!(run.log.end().map(|e| e.1) == Some(EndReason::Completed), "itinerary {it}: ended {:?}", run.log.end());
        check_drain(&run.records, initial).map_err(|e| format!("itinerary {it}: {e}"))?;
    }
    ensure!(go_charge > 0, "no waypoint check ever sent the robot to charge");

    // Continuous monitoring on random static maps.
    let mut trips = 0;
    let mut ticks = 0u64;
    for t in 0..500u64 {
        let (map, base, points) = random_tour_map(&mut rng, t)?;
        let grid = map.nav_grid(base_cfg.planner.inflation_radius);
        let far = points
            .iter()
            .map(|&p| plan_len(&grid, &base_cfg, Pose2D::at(base, 0.0), p).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max);
        let mut cfg = base_cfg.clone();
        cfg.map = format!("random-{t}");
        cfg.seed = t;
        cfg.tick_budget = 20_000;
        cfg.battery.mode = BatteryMode::ContinuousMonitor;
        cfg.battery.params.capacity = (2.0 * far + 1.0) * rng.random_range(1.2..2.5);
        let initial = cfg.battery.params.capacity * rng.random_range(0.05..1.0);
        cfg.battery.params.initial_range = Some(initial);
        cfg.tour.waypoints = points.iter().map(|p| [p.x, p.y]).collect();
        let dock = cfg.battery.params.dock_radius;
        let run = run_tour(cfg, Some(map)).map_err(|e| format!("map {t}: {e}"))?;
        for (tick, event) in events(&run.records) {
            match event {
                Event::Stranded => return Err(format!("map {t}: stranded at tick {tick}")),
                Event::GoCharge { .. } => trips += 1,
                _ => {}
            }
        }
        for (tick, robot, battery, _, _) in snapshots(&run.records) {
            let away = Vec2::new(robot[0], robot[1]).distance(base) > dock;
            ensure!(battery >= 0.0, "map {t} tick {tick}: negative range");
            ensure!(!(away && battery <= 0.0), "map {t} tick {tick}: depleted away from base");
        }
        if std::env::var_os("ACCEPT_DUMP").is_some() && run.log.end().map(|e| e.1) != Some(EndReason::Completed) {
            std::fs::write(format!("/tmp/map{t}.log"), run.log.to_text()).ok();
        }
        ensure!(run.log.end().map(|e| e.1) == Some(EndReason::Completed), "map {t}: ended {:?}", run.log.end());
        check_drain(&run.records, initial).map_err(|e| format!("map {t}: {e}"))?;
        ticks += run.log.end().map_or(0, |e| e.0);
    }
    ensure!(trips > 0, "continuous monitor never triggered");
    Ok(format!(
        "100 itineraries, {checks} waypoint checks, {go_charge} charge trips; 500 random maps, {trips} continuous trips, {ticks} ticks, no strandings"
    ))
}

/// A walled room with rectangular clutter, the base in a corner and a few
/// reachable waypoints.
fn random_tour_map(rng: &mut ChaCha8Rng, t: u64) -> Result<(MapFile, Vec2, Vec<Vec2>), String> {
    for _ in 0..50 {
        let w = rng.random_range(50..90usize);
        let h = rng.random_range(40..70usize);
        let mut cells = vec![vec![b'.'; w]; h];
        for (j, row) in cells.iter_mut().enumerate() {
            for (i, c) in row.iter_mut().enumerate() {
                if i == 0 || j == 0 || i == w - 1 || j == h - 1 {
                    *c = b'#';
                }
            }
        }
        for _ in 0..rng.random_range(2..9) {
            let bw = rng.random_range(2..12usize);
            let bh = rng.random_range(2..12usize);
            let x0 = rng.random_range(1..w - bw - 1);
            let y0 = rng.random_range(1..h - bh - 1);
            for row in cells.iter_mut().skip(y0).take(bh) {
                for c in row.iter_mut().skip(x0).take(bw) {
                    *c = b'#';
                }
            }
        }
        // Keep the dock corner open; text row 0 is the top edge.
        for row in cells.iter_mut().skip(h - 10).take(9) {
            for c in row.iter_mut().skip(1).take(9) {
                *c = b'.';
            }
        }
        cells[h - 5][4] = b'B';
        let mut text = format!("{w} {h} 0.1\n");
        for row in &cells {
            text.push_str(std::str::from_utf8(row).expect("ascii"));
            text.push('\n');
        }
        let map = MapFile::parse(&text).map_err(|e| format!("map {t}: {e}"))?;
        let base = map.base.ok_or("generated map lost its base")?;
        let cfg = SimConfig::for_scenario(ScenarioKind::Tour);
        let grid = map.nav_grid(cfg.planner.inflation_radius);
        let mut points = Vec::new();
        for _ in 0..40 {
            if points.len() == 4 {
                break;
            }
            let p = random_free_point(rng, &grid, 0.3);
            if plan_len(&grid, &cfg, Pose2D::at(base, 0.0), p).is_some() && p.distance(base) > 1.0 {
                points.push(p);
            }
        }
        if points.len() >= 2 {
            return Ok((map, base, points));
        }
    }
    Err(format!("map {t}: could not generate a usable map"))
}

// ---------------------------------------------------------------------------
// Interaction

fn blocker_config(seed: u64) -> SimConfig {
    let mut cfg = SimConfig::for_scenario(ScenarioKind::Retrieval);
    cfg.seed = seed;
    cfg.retrieval.human_gems = 0;
    cfg.policy = PolicyConfig::Blocker { window: None };
    cfg
}

struct InteractionStats {
    detours: usize,
    reverts: usize,
    waits: usize,
    min_translating: f64,
}

fn check_interaction(log: &TrialLog, footprint: f64, latch: u64, stats: &mut InteractionStats) -> Result<(), String> {
    let records = log.records().map_err(|e| e.to_string())?;
    let mut open_detour = false;
    let mut last_decision: Option<u64> = None;
    let mut last_blocked: Option<u64> = None;
    let mut safety_hold = false;
    for r in &records {
        match r {
            Record::Snapshot {
                tick,
                translated,
                separation,
                blocked,
                ..
            } => {
                if let (true, Some(s)) = (*translated > 0.0, separation) {
                    ensure!(*s >= footprint - 1e-12, "tick {tick}: translating at separation {s}");
                    stats.min_translating = stats.min_translating.min(*s);
                }
                if *blocked || safety_hold {
                    last_blocked = Some(*tick);
                }
            }
            Record::Event { tick, event } => match event {
                Event::Detour { .. } | Event::Revert { .. } => {
                    if let Some(prev) = last_decision {
                        ensure!(tick - prev >= latch, "ticks {prev} and {tick}: decisions {} ticks apart", tick - prev);
                    }
                    last_decision = Some(*tick);
                    if matches!(event, Event::Detour { .. }) {
                        stats.detours += 1;
                        open_detour = true;
                    } else {
                        stats.reverts += 1;
                        ensure!(open_detour, "tick {tick}: revert without a detour");
                        open_detour = false;
                    }
                }
                Event::GoalReached => open_detour = false,
                Event::Wait { reason } => {
                    stats.waits += 1;
                    if *reason == haven_core::log::WaitReason::Safety {
                        safety_hold = true;
                    }
                }
                Event::Resume { reason } if *reason == haven_core::log::WaitReason::Safety => safety_hold = false,
                Event::TrialEnd { .. } => ensure!(!open_detour, "tick {tick}: trial ended inside an unmatched detour"),
                _ => {}
            },
            _ => {}
        }
    }
    let clear = last_blocked.unwrap_or(0);
    for r in &records {
        if let Record::Snapshot { tick, mode, .. } = r {
            ensure!(
                !(*tick > clear + 50 && *mode == Mode::Waiting),
                "tick {tick}: still waiting {} ticks after the path cleared at {clear}",
                tick - clear
            );
        }
    }
    Ok(())
}

fn interaction_protocol() -> Check {
    let mut stats = InteractionStats {
        detours: 0,
        reverts: 0,
        waits: 0,
        min_translating: f64::INFINITY,
    };
    let mut end_budget = 0;
    for seed in 0..500u64 {
        let cfg = blocker_config(seed);
        let footprint = cfg.interaction.footprint_distance();
        let (log, _) = run_trial(&cfg).map_err(|e| e.to_string())?;
        if log.end().map(|e| e.1) != Some(EndReason::Completed) {
            end_budget += 1;
        }
        check_interaction(&log, footprint, cfg.interaction.latch_ticks, &mut stats).map_err(|e| format!("blocker seed {seed}: {e}"))?;
    }
    ensure!(stats.detours > 0 && stats.waits > 0, "blockers never forced a detour and a wait: {} / {}", stats.detours, stats.waits);
    let blocker = format!(
        "500 blocker trials: {} detours, {} reverts, {} waits, {end_budget} unfinished, closest while translating {:.3} m",
        stats.detours, stats.reverts, stats.waits, stats.min_translating
    );
    let mut walk = InteractionStats {
        detours: 0,
        reverts: 0,
        waits: 0,
        min_translating: f64::INFINITY,
    };
    for seed in 0..500u64 {
        let mut cfg = blocker_config(seed);
        cfg.policy = PolicyConfig::RandomWalk;
        cfg.tick_budget = 3000;
        let footprint = cfg.interaction.footprint_distance();
        let (log, _) = run_trial(&cfg).map_err(|e| e.to_string())?;
        check_interaction(&log, footprint, cfg.interaction.latch_ticks, &mut walk).map_err(|e| format!("random-walk seed {seed}: {e}"))?;
    }
    Ok(format!("{blocker}; 500 random-walk trials, closest while translating {:.3} m", walk.min_translating))
}

// ---------------------------------------------------------------------------
// Scenarios

/// Cyclic order of points around their centroid.
fn angular_order(points: &[Vec2]) -> Vec<usize> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        let ta = (points[a].y - cy).atan2(points[a].x - cx);
        let tb = (points[b].y - cy).atan2(points[b].x - cx);
        ta.total_cmp(&tb)
    });
    idx
}

fn scenario_completion() -> Check {
    let mut hallway_trials = 0;
    for map in ["builtin:hallway_loop", "builtin:hallway_ring"] {
        for seed in 0..50u64 {
            let mut cfg = SimConfig::for_scenario(ScenarioKind::Hallway);
            cfg.map = map.into();
            cfg.seed = seed;
            let session = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
            let ScenarioState::Hallway(h) = &session.state().scenario else {
                return Err("hallway session without hallway state".into());
            };
            let centers = h.rooms.clone();
            let start_room = h.from;
            ensure!(centers.len() == session.map().room_centers.len(), "{map}: room count");
            let tol = cfg.motion.arrive_tolerance + 1e-9;
            ensure!(
                session.state().robot.pose.position().distance(centers[start_room]) <= tol,
                "{map} seed {seed}: robot does not start in room {start_room}"
            );
            drop(session);
            let (log, metrics) = run_trial(&cfg).map_err(|e| e.to_string())?;
            ensure!(metrics.end_reason == Some(EndReason::Completed), "{map} seed {seed}: ended {:?}", metrics.end_reason);
            let records = log.records().map_err(|e| e.to_string())?;
            for r in &records {
                match r {
                    Record::Event {
                        tick,
                        event: Event::RoomReached { room },
                    } => {
                        let at = records
                            .iter()
                            .find_map(|q| match q {
                                Record::Snapshot { tick: t, robot, .. } if t == tick => Some(Vec2::new(robot[0], robot[1])),
                                _ => None,
                            })
                            .ok_or(format!("{map} seed {seed}: no snapshot at tick {tick}"))?;
                        ensure!(at.distance(centers[*room]) <= tol, "{map} seed {seed}: room {room} reached {} m away", at.distance(centers[*room]));
                    }
                    _ => {}
                }
            }
            let order = angular_order(&centers);
            let n = order.len();
            let pos_of = |room: usize| order.iter().position(|&r| r == room).expect("room in order");
            let mut visited: Vec<usize> = vec![start_room];
            visited.extend(metrics.rooms_reached.iter().map(|&(_, r)| r));
            ensure!(visited.len() == n, "{map} seed {seed}: visited {visited:?}");
            let mut sorted = visited.clone();
            sorted.sort();
            sorted.dedup();
            ensure!(sorted.len() == n, "{map} seed {seed}: rooms repeated or missed {visited:?}");
            let step = (pos_of(visited[1]) + n - pos_of(visited[0])) % n;
            ensure!(step == 1 || step == n - 1, "{map} seed {seed}: first leg skips rooms {visited:?}");
            for w in visited.windows(2) {
                ensure!(
                    (pos_of(w[1]) + n - pos_of(w[0])) % n == step,
                    "{map} seed {seed}: rooms out of loop order {visited:?}"
                );
            }
            hallway_trials += 1;
        }
    }

    let mut worst = 0;
    let mut robot_collections = 0;
    for seed in 0..50u64 {
        let mut cfg = SimConfig::for_scenario(ScenarioKind::Retrieval);
        cfg.seed = seed;
        cfg.tick_budget = 9000;
        let mut session = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
        let mut policy = HumanPolicy::from_config(&cfg);
        let total_gems = session.gems().len();
        while !session.is_ended() {
            let target = match &session.state().scenario {
                ScenarioState::Retrieval(r) => r.target,
                _ => None,
            };
            let input = policy.input(&session);
            session.buffer_input(input);
            session.tick();
            for e in session.last_events() {
                if let Event::GemCollected { gem, collector: Owner::Robot } = e {
                    robot_collections += 1;
                    ensure!(Some(*gem) == target, "retrieval seed {seed}: robot collected gem {gem}, target was {target:?}");
                }
            }
        }
        let m = session.metrics();
        ensure!(m.end_reason == Some(EndReason::Completed), "retrieval seed {seed}: ended {:?} at tick {}", m.end_reason, m.ticks);
        ensure!(m.ticks <= 9000, "retrieval seed {seed}: took {} ticks", m.ticks);
        let mut ids: Vec<u8> = m.gems_timeline.iter().map(|g| g.gem).collect();
        ids.sort();
        ids.dedup();
        ensure!(ids.len() == total_gems && m.gems_timeline.len() == total_gems, "retrieval seed {seed}: collected {:?}", m.gems_timeline);
        worst = worst.max(m.ticks);
    }
    Ok(format!(
        "{hallway_trials} hallway traversals in loop order; 50 retrievals complete, slowest {worst} ticks ({:.1} s), {robot_collections} robot collections all on target",
        worst as f64 * 0.02
    ))
}

// ---------------------------------------------------------------------------
// Determinism

fn determinism_configs() -> Vec<SimConfig> {
    let mut out = Vec::new();
    for k in 0..100u64 {
        let mut cfg = match k % 5 {
            0 | 1 => SimConfig::for_scenario(ScenarioKind::Retrieval),
            2 => blocker_config(0),
            3 => {
                let mut c = SimConfig::for_scenario(ScenarioKind::Hallway);
                if k % 2 == 1 {
                    c.map = "builtin:hallway_ring".into();
                }
                c
            }
            _ => {
                let mut c = blocker_config(0);
                c.policy = PolicyConfig::RandomWalk;
                c.tick_budget = 2000;
                c
            }
        };
        cfg.seed = 1000 + k;
        out.push(cfg);
    }
    out
}

fn determinism() -> Check {
    let configs = determinism_configs();
    let mut digests = Vec::new();
    let mut lines = 0;
    for (k, cfg) in configs.iter().enumerate() {
        let (log, live) = run_trial(cfg).map_err(|e| e.to_string())?;
        let back = replay(&TrialLog::parse(&log.to_text()).map_err(|e| e.to_string())?, Some(cfg)).map_err(|e| format!("trial {k}: {e}"))?;
        ensure!(back.digest() == log.digest(), "trial {k}: replay digest differs");
        ensure!(back.lines == log.lines, "trial {k}: replay lines differ");
        let a = finalize_metrics(&log).map_err(|e| e.to_string())?;
        let b = finalize_metrics(&back).map_err(|e| e.to_string())?;
        ensure!(a == b && a == live, "trial {k}: metrics differ between live, log and replay");
        lines += log.lines.len();
        digests.push(log.digest());
    }
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let out = Command::new(exe).arg("--digests").output().map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "digest subprocess failed");
    let other: Vec<String> = String::from_utf8_lossy(&out.stdout).lines().map(str::to_owned).collect();
    ensure!(other == digests, "a second process produced different logs");

    let mut perturbed = 0;
    for (k, cfg) in configs.iter().take(20).enumerate() {
        let mut session = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
        let mut policy = HumanPolicy::from_config(cfg);
        for t in 0..400 {
            if session.is_ended() {
                break;
            }
            let input = policy.input(&session);
            session.buffer_input(input);
            session.tick();
            if t % 97 != 0 {
                continue;
            }
            let base = session.state().clone();
            let h = state_hash(&base);
            ensure!(state_hash(&base.clone()) == h, "trial {k}: hash is not a function of state");
            let tweaks: [fn(&mut haven_core::engine::SimState); 4] = [
                |s| s.robot.pose.x = s.robot.pose.x.next_up(),
                |s| {
                    let hd = s.robot.pose.heading();
                    s.robot.pose.set_heading(if hd > 0.0 { hd.next_down() } else { hd.next_up() })
                },
                |s| s.robot.battery.remaining_range = s.robot.battery.remaining_range.next_down(),
                |s| {
                    if let Some(hm) = s.human.as_mut() {
                        hm.pose.y = hm.pose.y.next_up();
                    } else {
                        s.robot.pose.y = s.robot.pose.y.next_up();
                    }
                },
            ];
            for (i, tweak) in tweaks.iter().enumerate() {
                let mut s = base.clone();
                tweak(&mut s);
                if s == base {
                    continue;
                }
                ensure!(state_hash(&s) != h, "trial {k} tick {t}: 1-ulp change {i} not detected");
                perturbed += 1;
            }
        }
    }
    Ok(format!(
        "100 trials ({lines} records) replay bit-identically in-process and across processes; {perturbed} 1-ulp perturbations detected"
    ))
}

// ---------------------------------------------------------------------------
// Visualization

fn random_plan(rng: &mut ChaCha8Rng) -> PathPlan {
    let mut p = Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    let mut heading: f64 = rng.random_range(-PI..PI);
    let mut prims = Vec::new();
    for _ in 0..rng.random_range(1..8) {
        match rng.random_range(0..3) {
            0 => {
                let len = rng.random_range(0.05..3.0);
                let end = Vec2::new(p.x + len * heading.cos(), p.y + len * heading.sin());
                prims.push(Primitive::Line(LinePrimitive { start: p, end }));
                p = end;
            }
            1 => {
                let radius = rng.random_range(0.2..3.0);
                let sweep = rng.random_range(0.05..PI) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let side = sweep.signum();
                let center = Vec2::new(p.x - side * radius * heading.sin(), p.y + side * radius * heading.cos());
                let start_angle = (p.y - center.y).atan2(p.x - center.x);
                let arc = ArcPrimitive {
                    center,
                    radius,
                    start_angle,
                    sweep,
                };
                p = arc.end_point();
                heading = arc.end_heading();
                prims.push(Primitive::Arc(arc));
            }
            _ => {
                let delta = rng.random_range(-PI..PI);
                prims.push(Primitive::Rotate(RotatePrimitive {
                    at: p,
                    from_heading: heading,
                    delta,
                }));
                heading = wrap(heading + delta);
            }
        }
    }
    PathPlan::from_primitives(prims, p)
}

fn visualization_semantics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7152);
    let mut markers = 0usize;
    let mut worst: f64 = 0.0;
    for k in 0..20_000 {
        let plan = random_plan(&mut rng);
        let total = plan.total_length();
        let progress = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..total.max(1e-9) * 1.05) };
        let spacing = rng.random_range(0.05..1.0);
        let steps = rng.random_range(0..20usize);
        let out = project_path(&plan, progress, spacing, steps);
        ensure!(out.len() <= steps, "plan {k}: {} markers for window {steps}", out.len());
        for m in &out {
            let prim = &plan.primitives()[m.primitive];
            let d = primitive_distance(m.position, prim);
            worst = worst.max(d);
            ensure!(d <= 1e-6, "plan {k}: marker {} is {d} m off its primitive", m.index);
            let arc = matches!(prim, Primitive::Arc(_));
            ensure!(
                arc == (m.kind == haven_core::viz::MarkerKind::Arc),
                "plan {k}: marker {} kind {:?} on {:?}",
                m.index,
                m.kind,
                prim
            );
            ensure!(m.s > progress && m.s <= total + 1e-9, "plan {k}: marker at s {} outside ({progress}, {total}]", m.s);
        }
        markers += out.len();
    }

    let mut bubble_cases = 0;
    for _ in 0..100_000 {
        let robot = Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let r = 3.0 + rng.random_range(-1e-3..1e-3) * if rng.random_bool(0.1) { 0.0 } else { 1.0 };
        let a: f64 = rng.random_range(-PI..PI);
        let human = Vec2::new(robot.x + r * a.cos(), robot.y + r * a.sin());
        let expected = (human.x - robot.x).hypot(human.y - robot.y) < 3.0;
        ensure!(thought_bubble(robot, Some(human), "", 3.0).visible == expected, "bubble wrong at distance {r}");
        bubble_cases += 1;
    }
    ensure!(!thought_bubble(Vec2::ZERO, Some(Vec2::new(3.0, 0.0)), "", 3.0).visible, "bubble visible at exactly the radius");
    ensure!(!thought_bubble(Vec2::ZERO, None, "", 3.0).visible, "bubble visible without a human");

    let mut ticks = 0;
    let mut dimmed = 0;
    let mut cfgs: Vec<SimConfig> = (0..60).map(blocker_config).collect();
    cfgs.extend((0..20).map(|s| {
        let mut c = SimConfig::for_scenario(ScenarioKind::Retrieval);
        c.seed = s;
        c
    }));
    cfgs.extend((0..10).map(|s| {
        let mut c = SimConfig::for_scenario(ScenarioKind::Hallway);
        c.seed = s;
        c
    }));
    for cfg in &cfgs {
        let mut session = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
        let mut policy = HumanPolicy::from_config(cfg);
        let steps = cfg.viz.steps_to_project;
        while !session.is_ended() {
            let input = policy.input(&session);
            session.buffer_input(input);
            session.tick();
            ticks += 1;
            let viz = session.viz();
            let robot = &session.state().robot;
            let active: Vec<_> = viz.markers.iter().filter(|m| !m.dimmed).collect();
            let faded: Vec<_> = viz.markers.iter().filter(|m| m.dimmed).collect();
            ensure!(active.len() <= steps && faded.len() <= steps, "seed {}: window exceeded", cfg.seed);
            for m in &active {
                ensure!(plan_distance(m.position, robot.plan()) <= 1e-6, "seed {}: active marker off the active plan", cfg.seed);
            }
            match robot.detour() {
                Some(ctx) => {
                    for m in &faded {
                        ensure!(plan_distance(m.position, &ctx.original) <= 1e-6, "seed {}: dimmed marker off the original plan", cfg.seed);
                    }
                    dimmed += faded.len();
                }
                None => ensure!(faded.is_empty(), "seed {}: dimmed markers without a detour", cfg.seed),
            }
            if matches!(robot.mode, Mode::Forward | Mode::Idle | Mode::Waiting | Mode::Charging) {
                ensure!(viz.signal == TurnSignal::None, "seed {}: signal {:?} in {:?}", cfg.seed, viz.signal, robot.mode);
            }
            let human = session.state().human.as_ref().map(|h| h.pose.position());
            let expected = human.is_some_and(|h| h.distance(robot.pose.position()) < cfg.viz.bubble_radius);
            ensure!(viz.bubble.visible == expected, "seed {}: bubble visibility wrong", cfg.seed);
        }
        let log = session.into_log();
        let mut signal = TurnSignal::None;
        for r in log.records().map_err(|e| e.to_string())? {
            match r {
                Record::Event {
                    event: Event::Signal { signal: s },
                    ..
                } => signal = s,
                Record::Snapshot { tick, mode, .. } => {
                    if matches!(mode, Mode::Forward | Mode::Idle | Mode::Waiting | Mode::Charging) {
                        ensure!(signal == TurnSignal::None, "seed {} log tick {tick}: signal {signal:?} in {mode:?}", cfg.seed);
                    }
                }
                _ => {}
            }
        }
    }
    ensure!(dimmed > 0, "no detour ever produced dimmed markers");
    Ok(format!(
        "{markers} markers on 20000 random plans (worst {worst:.1e} m); {bubble_cases} bubble cases; {ticks} trial ticks over {} logs, {dimmed} dimmed markers",
        cfgs.len()
    ))
}
