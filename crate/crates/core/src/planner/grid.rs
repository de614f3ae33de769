use serde::{Deserialize, Serialize};

use crate::geometry::{ArcPrimitive, Vec2};

use super::PlanError;

/// Slack added around cells in swept-volume checks so that points landing
/// exactly on a shared cell edge are covered by both neighbours.
const EDGE_EPS: f64 = 1e-9;

/// A disc injected into a grid on top of the static obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicObstacle {
    pub center: Vec2,
    pub radius: f64,
}

/// Occupancy grid with an inflated mask for a disc-shaped robot.
///
/// Cell `(i, j)` covers `[i·res, (i+1)·res) × [j·res, (j+1)·res)`; anything
/// outside the grid counts as blocked.
#[derive(Debug, Clone, PartialEq)]
pub struct NavGrid {
    width: usize,
    height: usize,
    resolution: f64,
    inflation_radius: f64,
    raw: Vec<bool>,
    inflated: Vec<bool>,
}

impl NavGrid {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        blocked: Vec<bool>,
        inflation_radius: f64,
    ) -> Result<Self, PlanError> {
        if width == 0 || height == 0 {
            return Err(PlanError::InvalidGrid("empty grid".into()));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(PlanError::InvalidGrid(format!("bad resolution {resolution}")));
        }
        if !(inflation_radius >= 0.0 && inflation_radius.is_finite()) {
            return Err(PlanError::InvalidGrid(format!(
                "bad inflation radius {inflation_radius}"
            )));
        }
        if blocked.len() != width * height {
            return Err(PlanError::InvalidGrid(format!(
                "expected {} cells, got {}",
                width * height,
                blocked.len()
            )));
        }
        let mut grid = Self {
            width,
            height,
            resolution,
            inflation_radius,
            inflated: blocked.clone(),
            raw: blocked,
        };
        grid.inflate();
        Ok(grid)
    }

    /// Grid with no obstacles at all.
    pub fn open(width: usize, height: usize, resolution: f64, inflation_radius: f64) -> Self {
        Self::new(width, height, resolution, vec![false; width * height], inflation_radius)
            .expect("valid open grid")
    }

    fn inflate(&mut self) {
        let r = self.inflation_radius;
        if r <= 0.0 {
            return;
        }
        let reach = (r / self.resolution).ceil() as isize;
        for j in 0..self.height {
            for i in 0..self.width {
                if !self.raw[self.index(i, j)] {
                    continue;
                }
                for dj in -reach..=reach {
                    for di in -reach..=reach {
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        if !self.in_bounds(ni, nj) {
                            continue;
                        }
                        let gx = (di.abs() - 1).max(0) as f64 * self.resolution;
                        let gy = (dj.abs() - 1).max(0) as f64 * self.resolution;
                        if gx.hypot(gy) < r {
                            let idx = self.index(ni as usize, nj as usize);
                            self.inflated[idx] = true;
                        }
                    }
                }
            }
        }
    }

    /// Copy of this grid with discs marked blocked: a cell is blocked when any
    /// part of it lies closer than the disc radius to the disc center.
    pub fn with_obstacles(&self, extra: &[DynamicObstacle]) -> NavGrid {
        let mut out = self.clone();
        for obs in extra {
            let reach = (obs.radius / self.resolution).ceil() as isize + 1;
            let Some((ci, cj)) = self.cell_of_unclamped(obs.center) else {
                continue;
            };
            for nj in cj - reach..=cj + reach {
                for ni in ci - reach..=ci + reach {
                    if !self.in_bounds(ni, nj) {
                        continue;
                    }
                    let (i, j) = (ni as usize, nj as usize);
                    if self.square_distance(i, j, obs.center) < obs.radius {
                        let idx = self.index(i, j);
                        out.inflated[idx] = true;
                    }
                }
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn inflation_radius(&self) -> f64 {
        self.inflation_radius
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn in_bounds(&self, i: isize, j: isize) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.width && (j as usize) < self.height
    }

    fn cell_of_unclamped(&self, p: Vec2) -> Option<(isize, isize)> {
        if !p.is_finite() {
            return None;
        }
        Some((
            (p.x / self.resolution).floor() as isize,
            (p.y / self.resolution).floor() as isize,
        ))
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let (i, j) = self.cell_of_unclamped(p)?;
        self.in_bounds(i, j).then_some((i as usize, j as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            (i as f64 + 0.5) * self.resolution,
            (j as f64 + 0.5) * self.resolution,
        )
    }

    /// Distance from `p` to the closest point of cell `(i, j)`.
    pub fn square_distance(&self, i: usize, j: usize, p: Vec2) -> f64 {
        let x0 = i as f64 * self.resolution;
        let y0 = j as f64 * self.resolution;
        let dx = (x0 - p.x).max(0.0).max(p.x - (x0 + self.resolution));
        let dy = (y0 - p.y).max(0.0).max(p.y - (y0 + self.resolution));
        dx.hypot(dy)
    }

    pub fn is_raw_blocked(&self, i: usize, j: usize) -> bool {
        self.raw[self.index(i, j)]
    }

    /// Inflated occupancy.
    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.inflated[self.index(i, j)]
    }

    fn signed_blocked(&self, i: isize, j: isize) -> bool {
        !self.in_bounds(i, j) || self.inflated[self.index(i as usize, j as usize)]
    }

    pub fn point_blocked(&self, p: Vec2) -> bool {
        match self.cell_of(p) {
            Some((i, j)) => self.is_blocked(i, j),
            None => true,
        }
    }

    pub fn raw_mask(&self) -> &[bool] {
        &self.raw
    }

    pub fn inflated_mask(&self) -> &[bool] {
        &self.inflated
    }

    /// True when every cell touched by the segment is free.
    pub fn segment_clear(&self, a: Vec2, b: Vec2) -> bool {
        let res = self.resolution;
        let (sx0, sx1) = (a.x.min(b.x), a.x.max(b.x));
        let i0 = ((sx0 - EDGE_EPS) / res).floor() as isize;
        let i1 = ((sx1 + EDGE_EPS) / res).floor() as isize;
        let dx = b.x - a.x;
        for i in i0..=i1 {
            let cx0 = (i as f64 * res - EDGE_EPS).max(sx0);
            let cx1 = ((i + 1) as f64 * res + EDGE_EPS).min(sx1);
            if cx0 > cx1 {
                continue;
            }
            let (ylo, yhi) = if dx.abs() < 1e-15 {
                (a.y.min(b.y), a.y.max(b.y))
            } else {
                let slope = (b.y - a.y) / dx;
                let y0 = a.y + (cx0 - a.x) * slope;
                let y1 = a.y + (cx1 - a.x) * slope;
                (y0.min(y1), y0.max(y1))
            };
            let ylo = ylo.max(a.y.min(b.y));
            let yhi = yhi.min(a.y.max(b.y));
            let j0 = ((ylo - EDGE_EPS) / res).floor() as isize;
            let j1 = ((yhi + EDGE_EPS) / res).floor() as isize;
            for j in j0..=j1 {
                if self.signed_blocked(i, j) {
                    return false;
                }
            }
        }
        true
    }

    /// True when no blocked cell intersects the arc.
    pub fn arc_clear(&self, arc: &ArcPrimitive) -> bool {
        let (lo, hi) = arc_bounds(arc);
        let res = self.resolution;
        let i0 = ((lo.x - EDGE_EPS) / res).floor() as isize;
        let i1 = ((hi.x + EDGE_EPS) / res).floor() as isize;
        let j0 = ((lo.y - EDGE_EPS) / res).floor() as isize;
        let j1 = ((hi.y + EDGE_EPS) / res).floor() as isize;
        for j in j0..=j1 {
            for i in i0..=i1 {
                if !self.signed_blocked(i, j) {
                    continue;
                }
                let x0 = i as f64 * res - EDGE_EPS;
                let y0 = j as f64 * res - EDGE_EPS;
                let x1 = (i + 1) as f64 * res + EDGE_EPS;
                let y1 = (j + 1) as f64 * res + EDGE_EPS;
                if arc_hits_box(arc, x0, y0, x1, y1) {
                    return false;
                }
            }
        }
        true
    }
}

fn arc_bounds(arc: &ArcPrimitive) -> (Vec2, Vec2) {
    let s = arc.start_point();
    let e = arc.end_point();
    let mut lo = Vec2::new(s.x.min(e.x), s.y.min(e.y));
    let mut hi = Vec2::new(s.x.max(e.x), s.y.max(e.y));
    for k in 0..4 {
        let theta = k as f64 * std::f64::consts::FRAC_PI_2;
        if arc.contains_angle(theta) {
            let p = arc.point_at_angle(theta);
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
    }
    (lo, hi)
}

fn inside(p: Vec2, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
    p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1
}

fn arc_hits_box(arc: &ArcPrimitive, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
    if inside(arc.start_point(), x0, y0, x1, y1) || inside(arc.end_point(), x0, y0, x1, y1) {
        return true;
    }
    let c = arc.center;
    let r = arc.radius;
    let hit = |theta: f64| arc.contains_angle(theta);
    for x in [x0, x1] {
        let dx = x - c.x;
        if dx.abs() <= r {
            let h = (r * r - dx * dx).max(0.0).sqrt();
            for y in [c.y - h, c.y + h] {
                if y >= y0 && y <= y1 && hit((y - c.y).atan2(dx)) {
                    return true;
                }
            }
        }
    }
    for y in [y0, y1] {
        let dy = y - c.y;
        if dy.abs() <= r {
            let h = (r * r - dy * dy).max(0.0).sqrt();
            for x in [c.x - h, c.x + h] {
                if x >= x0 && x <= x1 && hit(dy.atan2(x - c.x)) {
                    return true;
                }
            }
        }
    }
    false
}
