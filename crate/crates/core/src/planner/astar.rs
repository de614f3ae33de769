use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::NavGrid;

/// Path cost on the 8-connected grid, kept as exact move counts.
///
/// Two different counts never have the same real value, so comparing the
/// derived `f64` is an exact total order for every grid we handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct GridCost {
    pub straight: u32,
    pub diagonal: u32,
}

impl GridCost {
    pub fn cells(self) -> f64 {
        self.straight as f64 + self.diagonal as f64 * std::f64::consts::SQRT_2
    }

    pub fn meters(self, resolution: f64) -> f64 {
        self.cells() * resolution
    }

    fn add(self, diagonal: bool) -> Self {
        if diagonal {
            Self { diagonal: self.diagonal + 1, ..self }
        } else {
            Self { straight: self.straight + 1, ..self }
        }
    }

    fn octile(a: (usize, usize), b: (usize, usize)) -> Self {
        let dx = a.0.abs_diff(b.0) as u32;
        let dy = a.1.abs_diff(b.1) as u32;
        Self {
            straight: dx.max(dy) - dx.min(dy),
            diagonal: dx.min(dy),
        }
    }
}

/// Neighbour order N, NE, E, SE, S, SW, W, NW (y grows northwards).
pub const NEIGHBOURS: [(isize, isize); 8] = [
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
];

#[derive(Debug, Clone, Copy)]
struct Open {
    f: f64,
    h: f64,
    seq: u64,
    node: usize,
}

impl PartialEq for Open {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Open {}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Open {
    // Min-heap on (f, h, insertion order).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.h.total_cmp(&self.h))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Moves allowed out of a cell: in-bounds free targets, diagonals only when
/// both orthogonal cells are free.
pub fn successors(grid: &NavGrid, node: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
    let (i, j) = grid.coords(node);
    NEIGHBOURS.iter().filter_map(move |&(di, dj)| {
        let (ni, nj) = (i as isize + di, j as isize + dj);
        let free = |x: isize, y: isize| grid.in_bounds(x, y) && !grid.is_blocked(x as usize, y as usize);
        if !free(ni, nj) {
            return None;
        }
        let diagonal = di != 0 && dj != 0;
        if diagonal && !(free(i as isize + di, j as isize) && free(i as isize, j as isize + dj)) {
            return None;
        }
        Some((grid.index(ni as usize, nj as usize), diagonal))
    })
}

/// A* from `start` to `goal` cell; returns the cell sequence and its cost.
pub fn astar(grid: &NavGrid, start: usize, goal: usize) -> Option<(Vec<usize>, GridCost)> {
    let n = grid.width() * grid.height();
    let goal_xy = grid.coords(goal);
    let mut g: Vec<Option<GridCost>> = vec![None; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;

    g[start] = Some(GridCost::default());
    let h0 = GridCost::octile(grid.coords(start), goal_xy).cells();
    heap.push(Open { f: h0, h: h0, seq, node: start });

    while let Some(Open { node, .. }) = heap.pop() {
        if closed[node] {
            continue;
        }
        closed[node] = true;
        if node == goal {
            let mut path = vec![goal];
            let mut cur = goal;
            while cur != start {
                cur = parent[cur];
                path.push(cur);
            }
            path.reverse();
            return Some((path, g[goal].expect("goal reached")));
        }
        let gn = g[node].expect("expanded nodes have a cost");
        for (next, diagonal) in successors(grid, node) {
            if closed[next] {
                continue;
            }
            let cand = gn.add(diagonal);
            if g[next].is_none_or(|old| cand.cells() < old.cells()) {
                g[next] = Some(cand);
                parent[next] = node;
                let h = GridCost::octile(grid.coords(next), goal_xy).cells();
                seq += 1;
                heap.push(Open { f: cand.cells() + h, h, seq, node: next });
            }
        }
    }
    None
}

/// Single-source grid distances (in meters) from `source` to every cell.
/// Unreachable cells are `f64::INFINITY`.
pub fn distance_field(grid: &NavGrid, source: usize) -> Vec<f64> {
    let n = grid.width() * grid.height();
    let mut dist: Vec<Option<GridCost>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    dist[source] = Some(GridCost::default());
    heap.push(Open { f: 0.0, h: 0.0, seq, node: source });
    while let Some(Open { node, .. }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        let dn = dist[node].expect("settled");
        for (next, diagonal) in successors(grid, node) {
            let cand = dn.add(diagonal);
            if !done[next] && dist[next].is_none_or(|old| cand.cells() < old.cells()) {
                dist[next] = Some(cand);
                seq += 1;
                heap.push(Open { f: cand.cells(), h: 0.0, seq, node: next });
            }
        }
    }
    dist.into_iter()
        .map(|d| d.map_or(f64::INFINITY, |c| c.meters(grid.resolution())))
        .collect()
}
