//! Fast Marching Square planning over an occupancy grid, plus a pure-pursuit
//! follower.
//!
//! Pass one marches the distance to the nearest obstacle, which is saturated
//! into a speed map. Pass two marches arrival time from the goal through that
//! speed map; the path is gradient descent on the interpolated arrival time.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{FRAC_PI_2, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{normalize_angle, CellIndex, CellState, GridMap, Pose2D, Vec2, VelocityCommand};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        ScalarField {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn get(&self, c: CellIndex) -> f64 {
        self.at(c.col, c.row)
    }

    /// Plain-text matrix, top row first, `inf` for unreached cells.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        for row in (0..self.height).rev() {
            let line: Vec<String> = (0..self.width)
                .map(|col| {
                    let v = self.at(col, row);
                    if v.is_infinite() {
                        "inf".to_string()
                    } else {
                        format!("{v:.6}")
                    }
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Local traversal speed in [0, 1]; 0 means impassable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedMap(pub ScalarField);

impl SpeedMap {
    pub fn get(&self, c: CellIndex) -> f64 {
        self.0.get(c)
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }
}

/// Neighborhood used by the arrival-time pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stencil {
    /// First-order upwind update over the four axial neighbors.
    Axial,
    /// Axial and diagonal neighbors with triangle updates; far less
    /// direction bias than `Axial`.
    Octagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    pub w_max: f64,
    pub unknown_speed: f64,
    pub goal_tolerance: f64,
    /// Descent step limit; `None` means 10·(width+height).
    pub step_budget: Option<usize>,
    pub v_max: f64,
    pub omega_max: f64,
    pub lookahead: f64,
    pub stencil: Stencil,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            w_max: 2.0,
            unknown_speed: 0.5,
            goal_tolerance: 0.3,
            step_budget: None,
            v_max: 0.5,
            omega_max: 0.8,
            lookahead: 1.0,
            stencil: Stencil::Octagonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub points: Vec<Vec2>,
    pub total_length: f64,
}

impl Path {
    pub fn new(points: Vec<Vec2>) -> Self {
        let total_length = points.windows(2).map(|w| w[0].distance(w[1])).sum();
        Path {
            points,
            total_length,
        }
    }

    pub fn last(&self) -> Vec2 {
        *self.points.last().expect("paths are never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum NavError {
    #[error("goal lies in an impassable cell")]
    GoalInObstacle,
    #[error("goal is unreachable")]
    Unreachable,
    #[error("point outside the map")]
    OutOfBounds,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on value, ties broken by cell index.
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const AXIAL: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const DIAGONAL: [(i64, i64); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

struct March<'a> {
    w: usize,
    h: usize,
    step: f64,
    /// Slowness per cell; +inf is impassable.
    slow: &'a [f64],
    t: Vec<f64>,
    done: Vec<bool>,
}

impl March<'_> {
    fn idx(&self, col: i64, row: i64) -> Option<usize> {
        (col >= 0 && row >= 0 && (col as usize) < self.w && (row as usize) < self.h)
            .then(|| row as usize * self.w + col as usize)
    }

    fn passable(&self, i: usize) -> bool {
        self.slow[i].is_finite()
    }

    fn known(&self, col: i64, row: i64) -> Option<(usize, f64)> {
        let i = self.idx(col, row)?;
        (self.done[i] && self.t[i].is_finite()).then(|| (i, self.t[i]))
    }

    fn axial_update(&self, col: i64, row: i64) -> f64 {
        let f = self.step * self.slow[row as usize * self.w + col as usize];
        let axis = |a: (i64, i64), b: (i64, i64)| {
            let va = self
                .known(col + a.0, row + a.1)
                .map_or(f64::INFINITY, |(_, v)| v);
            let vb = self
                .known(col + b.0, row + b.1)
                .map_or(f64::INFINITY, |(_, v)| v);
            va.min(vb)
        };
        let tx = axis((1, 0), (-1, 0));
        let ty = axis((0, 1), (0, -1));
        if tx.is_finite() && ty.is_finite() && (tx - ty).abs() <= f {
            (tx + ty + (2.0 * f * f - (tx - ty).powi(2)).sqrt()) / 2.0
        } else {
            tx.min(ty) + f
        }
    }

    fn octagonal_update(&self, col: i64, row: i64) -> f64 {
        let i = row as usize * self.w + col as usize;
        let si = self.slow[i];
        let h = self.step;
        let mut best = f64::INFINITY;
        for (dc, dr) in AXIAL {
            if let Some((j, v)) = self.known(col + dc, row + dr) {
                best = best.min(v + h * (si + self.slow[j]) / 2.0);
            }
        }
        for (dc, dr) in DIAGONAL {
            let side_a = self.idx(col + dc, row);
            let side_b = self.idx(col, row + dr);
            let open = side_a.is_some_and(|k| self.passable(k))
                && side_b.is_some_and(|k| self.passable(k));
            if !open {
                continue;
            }
            if let Some((j, v)) = self.known(col + dc, row + dr) {
                best = best.min(v + h * SQRT_2 * (si + self.slow[j]) / 2.0);
            }
        }
        // Triangles (P, A, D): A an axial neighbor, D a diagonal next to A.
        for (dc, dr) in AXIAL {
            let Some((ja, a)) = self.known(col + dc, row + dr) else {
                continue;
            };
            let perps: [(i64, i64); 2] = if dc != 0 {
                [(0, 1), (0, -1)]
            } else {
                [(1, 0), (-1, 0)]
            };
            for (pc, pr) in perps {
                let Some((jd, d)) = self.known(col + dc + pc, row + dr + pr) else {
                    continue;
                };
                let diff = a - d;
                if diff < 0.0 {
                    continue;
                }
                let s = (si + (self.slow[ja] + self.slow[jd]) / 2.0) / 2.0;
                let disc = (h * s).powi(2) - diff * diff;
                if disc < 0.0 {
                    continue;
                }
                let t0 = a + disc.sqrt();
                if diff <= t0 - a {
                    best = best.min(t0);
                }
            }
        }
        best
    }

    fn run(&mut self, seeds: &[(usize, f64)], stencil: Stencil) {
        let mut heap = BinaryHeap::new();
        for &(i, v) in seeds {
            if v < self.t[i] {
                self.t[i] = v;
                heap.push(Entry(v, i));
            }
        }
        let neighbors: &[(i64, i64)] = match stencil {
            Stencil::Axial => &AXIAL,
            Stencil::Octagonal => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        };
        while let Some(Entry(v, i)) = heap.pop() {
            if self.done[i] || v > self.t[i] {
                continue;
            }
            self.done[i] = true;
            let (col, row) = ((i % self.w) as i64, (i / self.w) as i64);
            for &(dc, dr) in neighbors {
                let (nc, nr) = (col + dc, row + dr);
                let Some(j) = self.idx(nc, nr) else { continue };
                if self.done[j] || !self.passable(j) {
                    continue;
                }
                let cand = match stencil {
                    Stencil::Axial => self.axial_update(nc, nr),
                    Stencil::Octagonal => self.octagonal_update(nc, nr),
                };
                if cand < self.t[j] {
                    self.t[j] = cand;
                    heap.push(Entry(cand, j));
                }
            }
        }
    }
}

fn march(
    w: usize,
    h: usize,
    step: f64,
    slow: &[f64],
    seeds: &[(usize, f64)],
    stencil: Stencil,
) -> ScalarField {
    let mut m = March {
        w,
        h,
        step,
        slow,
        t: vec![f64::INFINITY; w * h],
        done: vec![false; w * h],
    };
    m.run(seeds, stencil);
    ScalarField {
        width: w,
        height: h,
        values: m.t,
    }
}

/// Distance to the nearest Obstacle cell by axial upwind fast marching;
/// +inf everywhere when the grid has no obstacles.
pub fn obstacle_distance(grid: &GridMap) -> ScalarField {
    let (w, h) = (grid.width(), grid.height());
    let slow = vec![1.0; w * h];
    let seeds: Vec<(usize, f64)> = grid
        .cells()
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == CellState::Obstacle)
        .map(|(i, _)| (i, 0.0))
        .collect();
    march(w, h, grid.resolution(), &slow, &seeds, Stencil::Axial)
}

pub fn speed_map(dist: &ScalarField, grid: &GridMap, config: &NavConfig) -> SpeedMap {
    let values = grid
        .cells()
        .iter()
        .zip(&dist.values)
        .map(|(s, &d)| match s {
            CellState::Obstacle => 0.0,
            CellState::Unknown => config.unknown_speed.clamp(0.0, 1.0),
            CellState::Free => d.min(config.w_max) / config.w_max,
        })
        .collect();
    SpeedMap(ScalarField {
        width: grid.width(),
        height: grid.height(),
        values,
    })
}

fn slowness(speed: &SpeedMap) -> Vec<f64> {
    speed
        .0
        .values
        .iter()
        .map(|&v| if v > 0.0 { 1.0 / v } else { f64::INFINITY })
        .collect()
}

/// Arrival time from `goal` through the speed map; cells of speed 0 stay
/// at +inf.
pub fn arrival_time(
    speed: &SpeedMap,
    goal: CellIndex,
    resolution: f64,
    stencil: Stencil,
) -> Result<ScalarField, NavError> {
    let (w, h) = (speed.width(), speed.height());
    if goal.col >= w || goal.row >= h {
        return Err(NavError::OutOfBounds);
    }
    if !(speed.get(goal) > 0.0) {
        return Err(NavError::GoalInObstacle);
    }
    let slow = slowness(speed);
    Ok(march(
        w,
        h,
        resolution,
        &slow,
        &[(goal.row * w + goal.col, 0.0)],
        stencil,
    ))
}

/// Bilinear sampler over cell-centered values. Impassable corners are
/// replaced by a ceiling above every finite value so the descent is pushed
/// away from them.
struct Sampler<'a> {
    t: &'a ScalarField,
    grid: &'a GridMap,
    ceiling: f64,
}

impl<'a> Sampler<'a> {
    fn new(t: &'a ScalarField, grid: &'a GridMap, speed: &SpeedMap) -> Self {
        let max_t = t
            .values
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        let max_slow = speed
            .0
            .values
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|v| 1.0 / v)
            .fold(1.0, f64::max);
        Sampler {
            t,
            grid,
            ceiling: max_t + grid.resolution() * max_slow,
        }
    }

    fn corner(&self, col: i64, row: i64) -> f64 {
        let c = col.clamp(0, self.t.width as i64 - 1) as usize;
        let r = row.clamp(0, self.t.height as i64 - 1) as usize;
        let v = self.t.at(c, r);
        if v.is_finite() {
            v
        } else {
            self.ceiling
        }
    }

    /// Value and gradient (per meter) at a world point.
    fn eval(&self, p: Vec2) -> (f64, Vec2) {
        let g = self.grid.world_to_grid(p);
        let (gx, gy) = (g.x - 0.5, g.y - 0.5);
        let (c0, r0) = (gx.floor() as i64, gy.floor() as i64);
        let (fx, fy) = (gx - c0 as f64, gy - r0 as f64);
        let v00 = self.corner(c0, r0);
        let v10 = self.corner(c0 + 1, r0);
        let v01 = self.corner(c0, r0 + 1);
        let v11 = self.corner(c0 + 1, r0 + 1);
        let value = v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy;
        let dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
        let dy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
        let res = self.grid.resolution();
        let theta = self.grid.origin().theta;
        (value, Vec2::new(dx / res, dy / res).rotate(theta))
    }

    fn passable(&self, p: Vec2) -> bool {
        self.grid
            .world_to_cell(p)
            .is_ok_and(|c| self.t.get(c).is_finite())
    }
}

/// Interpolated arrival time at a world point, as used by the descent.
pub fn sample_arrival(t: &ScalarField, grid: &GridMap, speed: &SpeedMap, p: Vec2) -> f64 {
    Sampler::new(t, grid, speed).eval(p).0
}

/// Gradient descent on the interpolated arrival time, step h/2, until within
/// the goal tolerance; the goal itself closes the path.
pub fn extract_path(
    t: &ScalarField,
    speed: &SpeedMap,
    grid: &GridMap,
    start: Vec2,
    goal: Vec2,
    config: &NavConfig,
) -> Result<Path, NavError> {
    let start_cell = grid
        .world_to_cell(start)
        .map_err(|_| NavError::OutOfBounds)?;
    if start.distance(goal) <= config.goal_tolerance {
        return Ok(Path::new(if start == goal {
            vec![start]
        } else {
            vec![start, goal]
        }));
    }
    if !t.get(start_cell).is_finite() {
        return Err(NavError::Unreachable);
    }
    let res = grid.resolution();
    let budget = config
        .step_budget
        .unwrap_or(10 * (grid.width() + grid.height()));
    let goal_cell = grid
        .world_to_cell(goal)
        .map_err(|_| NavError::OutOfBounds)?;
    let sampler = Sampler::new(t, grid, speed);
    let mut points = vec![start];
    let mut p = start;
    let (mut value, mut grad) = sampler.eval(p);
    let mut steps = 0;
    while p.distance(goal) > config.goal_tolerance {
        // T bottoms out at the goal cell's center, which can sit farther
        // than the tolerance from an off-center goal.
        if grid.world_to_cell(p).is_ok_and(|c| c == goal_cell) {
            break;
        }
        if steps >= budget {
            return Err(NavError::Unreachable);
        }
        steps += 1;
        let mut next = None;
        if grad.norm() > 0.0 {
            let dir = grad.normalized() * -1.0;
            let mut len = res / 2.0;
            for _ in 0..6 {
                let q = p + dir * len;
                if sampler.passable(q) {
                    let (qv, qg) = sampler.eval(q);
                    if qv < value {
                        next = Some((q, qv, qg));
                        break;
                    }
                }
                len /= 2.0;
            }
        }
        let Some((q, qv, qg)) = next.or_else(|| discrete_step(t, grid, &sampler, p, value)) else {
            return Err(NavError::Unreachable);
        };
        points.push(q);
        p = q;
        value = qv;
        grad = qg;
    }
    if p != goal {
        points.push(goal);
    }
    Ok(Path::new(points))
}

/// Fallback when the continuous descent stalls: hop to the best
/// lower-valued neighbor cell center, never cutting corners.
fn discrete_step(
    t: &ScalarField,
    grid: &GridMap,
    sampler: &Sampler,
    p: Vec2,
    value: f64,
) -> Option<(Vec2, f64, Vec2)> {
    let c = grid.world_to_cell(p).ok()?;
    let (col, row) = (c.col as i64, c.row as i64);
    let finite = |dc: i64, dr: i64| {
        grid.contains(col + dc, row + dr)
            && t.at((col + dc) as usize, (row + dr) as usize).is_finite()
    };
    let mut best: Option<(Vec2, f64, Vec2)> = None;
    for (dc, dr) in AXIAL.iter().chain(DIAGONAL.iter()).copied() {
        if !finite(dc, dr) || (dc != 0 && dr != 0 && !(finite(dc, 0) && finite(0, dr))) {
            continue;
        }
        let center = grid.cell_center(CellIndex::new((col + dc) as usize, (row + dr) as usize));
        // Stay within one resolution per step.
        let q = if center.distance(p) > grid.resolution() {
            p + (center - p).normalized() * grid.resolution()
        } else {
            center
        };
        if !sampler.passable(q) {
            continue;
        }
        let (qv, qg) = sampler.eval(q);
        if qv < value && best.as_ref().is_none_or(|b| qv < b.1) {
            best = Some((q, qv, qg));
        }
    }
    best
}

/// All intermediate fields of one planning query, for inspection and dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFields {
    pub distance: ScalarField,
    pub speed: SpeedMap,
    pub arrival: ScalarField,
}

pub fn plan_fields(grid: &GridMap, goal: Vec2, config: &NavConfig) -> Result<PlanFields, NavError> {
    let goal_cell = grid
        .world_to_cell(goal)
        .map_err(|_| NavError::OutOfBounds)?;
    let distance = obstacle_distance(grid);
    let speed = speed_map(&distance, grid, config);
    let arrival = arrival_time(&speed, goal_cell, grid.resolution(), config.stencil)?;
    Ok(PlanFields {
        distance,
        speed,
        arrival,
    })
}

pub fn plan(grid: &GridMap, start: Vec2, goal: Vec2, config: &NavConfig) -> Result<Path, NavError> {
    if start == goal {
        grid.world_to_cell(start)
            .map_err(|_| NavError::OutOfBounds)?;
        return Ok(Path::new(vec![start]));
    }
    let f = plan_fields(grid, goal, config)?;
    extract_path(&f.arrival, &f.speed, grid, start, goal, config)
}

/// Pure pursuit: steer toward the first path point at least `lookahead`
/// ahead of the closest one. A heading error of π/2 saturates the turn rate
/// and stops forward motion; within the goal tolerance of the final point
/// the rover stops.
pub fn follow(path: &Path, pose: Pose2D, config: &NavConfig) -> VelocityCommand {
    let pos = pose.position();
    let end = path.last();
    let to_end = pos.distance(end);
    if to_end <= config.goal_tolerance {
        return VelocityCommand::STOP;
    }
    let closest = path
        .points
        .iter()
        .enumerate()
        .min_by(|a, b| {
            a.1.distance(pos)
                .total_cmp(&b.1.distance(pos))
                .then(b.0.cmp(&a.0))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let target = path.points[closest..]
        .iter()
        .find(|q| q.distance(pos) >= config.lookahead)
        .copied()
        .unwrap_or(end);
    let err = normalize_angle((target - pos).angle() - pose.theta);
    let omega = (config.omega_max * err / FRAC_PI_2).clamp(-config.omega_max, config.omega_max);
    let v = config.v_max * (1.0 - err.abs() / FRAC_PI_2).max(0.0);
    // Slow down on the final approach so a tick never jumps past the end.
    let v = v.min(to_end);
    VelocityCommand::new(v, if err.abs() < 1e-12 { 0.0 } else { omega })
}
