// Independent oracles and fixture builders shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use cisru_sim::nav::SpeedMap;
use cisru_sim::world::{CellIndex, CellState, GridMap, Pose2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NEIGHBORS8: [(i64, i64, bool); 8] = [
    (1, 0, false),
    (-1, 0, false),
    (0, 1, false),
    (0, -1, false),
    (1, 1, true),
    (1, -1, true),
    (-1, 1, true),
    (-1, -1, true),
];

/// Generic 8-connected Dijkstra that never cuts a blocked corner.
/// `edge(i, j, diagonal)` returns None when the move is impossible.
pub fn dijkstra8(
    width: usize,
    height: usize,
    source: usize,
    passable: impl Fn(usize) -> bool,
    edge: impl Fn(usize, usize, bool) -> f64,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = width * height;
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Reverse((0u64, source)));
    let key = |d: f64| d.to_bits();
    while let Some(Reverse((kd, i))) = heap.pop() {
        if kd != key(dist[i]) {
            continue;
        }
        let (c, r) = ((i % width) as i64, (i / width) as i64);
        for (dc, dr, diag) in NEIGHBORS8 {
            let (nc, nr) = (c + dc, r + dr);
            if nc < 0 || nr < 0 || nc >= width as i64 || nr >= height as i64 {
                continue;
            }
            let j = nr as usize * width + nc as usize;
            if !passable(j) {
                continue;
            }
            if diag {
                let a = r as usize * width + nc as usize;
                let b = nr as usize * width + c as usize;
                if !passable(a) || !passable(b) {
                    continue;
                }
            }
            let nd = dist[i] + edge(i, j, diag);
            if nd < dist[j] {
                dist[j] = nd;
                prev[j] = Some(i);
                heap.push(Reverse((key(nd), j)));
            }
        }
    }
    (dist, prev)
}

/// Travel-time oracle: edge cost L·(1/Vi + 1/Vj)/2 with L = h or h·√2.
pub fn dijkstra_arrival(speed: &SpeedMap, goal: CellIndex, h: f64) -> Vec<f64> {
    let v = &speed.0.values;
    let w = speed.width();
    dijkstra8(
        w,
        speed.height(),
        goal.row * w + goal.col,
        |i| v[i] > 0.0,
        |i, j, diag| {
            let l = if diag {
                h * std::f64::consts::SQRT_2
            } else {
                h
            };
            l * (1.0 / v[i] + 1.0 / v[j]) / 2.0
        },
    )
    .0
}

/// Plain geometric shortest path over non-obstacle cells, as cell indices
/// from start to goal.
pub fn occupancy_shortest_path(
    grid: &GridMap,
    start: CellIndex,
    goal: CellIndex,
) -> Option<Vec<CellIndex>> {
    let w = grid.width();
    let cells = grid.cells();
    let (dist, prev) = dijkstra8(
        w,
        grid.height(),
        grid.linear(start),
        |i| cells[i] != CellState::Obstacle,
        |_, _, diag| if diag { std::f64::consts::SQRT_2 } else { 1.0 },
    );
    let g = grid.linear(goal);
    if dist[g].is_infinite() {
        return None;
    }
    let mut out = vec![goal];
    let mut cur = g;
    while let Some(p) = prev[cur] {
        out.push(grid.cell_of(p));
        cur = p;
    }
    out.reverse();
    Some(out)
}

pub fn random_grid(seed: u64, size: usize, density: f64) -> GridMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GridMap::new(size, size, 1.0, Pose2D::default(), CellState::Free).unwrap();
    for i in 0..g.len() {
        if rng.gen::<f64>() < density {
            g.set(g.cell_of(i), CellState::Obstacle);
        }
    }
    g
}

/// Corridor maps: (rows top-first, start cell, goal cell).
pub fn corridor_maps() -> Vec<(Vec<&'static str>, CellIndex, CellIndex)> {
    vec![
        (
            vec![
                "##############################",
                "#............................#",
                "#............................#",
                "#............................#",
                "#............................#",
                "#............................#",
                "##############################",
            ],
            CellIndex::new(1, 1),
            CellIndex::new(28, 5),
        ),
        (
            vec![
                "##########################",
                "#........................#",
                "#........................#",
                "#.......#########........#",
                "#.......#########........#",
                "#........................#",
                "#........................#",
                "##########################",
            ],
            CellIndex::new(1, 1),
            CellIndex::new(24, 6),
        ),
        (
            vec![
                "####################",
                "#..........#.......#",
                "#..........#.......#",
                "#..........#.......#",
                "#......#...#...#...#",
                "#......#.......#...#",
                "#......#.......#...#",
                "#......#.......#...#",
                "####################",
            ],
            CellIndex::new(1, 1),
            CellIndex::new(18, 7),
        ),
        (
            vec![
                "######################",
                "#....................#",
                "#....................#",
                "#....................#",
                "###########.....######",
                "###########.....######",
                "#....................#",
                "#....................#",
                "#....................#",
                "######################",
            ],
            CellIndex::new(1, 1),
            CellIndex::new(20, 8),
        ),
        (
            vec![
                "########################",
                "#......................#",
                "#......................#",
                "#...####.......####....#",
                "#...####.......####....#",
                "#......................#",
                "#......................#",
                "########################",
            ],
            CellIndex::new(1, 6),
            CellIndex::new(22, 1),
        ),
    ]
}

/// A synthetic registration problem: `b` is a rotated, shifted view of the
/// same terrain as `a`, and `truth` maps b's frame into a's.
pub struct SyntheticPair {
    pub a: GridMap,
    pub b: GridMap,
    pub truth: cisru_sim::fusion::RigidTransform2D,
    pub overlap: f64,
}

/// Randomly rotated rectangular rocks; returns the grid and every rock
/// corner in world coordinates.
fn terrain(rng: &mut ChaCha8Rng, size: usize) -> (GridMap, Vec<cisru_sim::world::Vec2>) {
    use cisru_sim::world::Vec2;
    let mut g = GridMap::new(size, size, 1.0, Pose2D::default(), CellState::Free).unwrap();
    let mut corners = Vec::new();
    for _ in 0..(size * size / 200) {
        let half = Vec2::new(rng.gen_range(1.5..5.0), rng.gen_range(1.5..5.0));
        let center = Vec2::new(
            rng.gen_range(0.0..size as f64),
            rng.gen_range(0.0..size as f64),
        );
        let theta = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
        let rock = Pose2D::new(center.x, center.y, theta);
        for i in 0..g.len() {
            let c = g.cell_of(i);
            let local = rock.inverse_transform_point(g.cell_center(c));
            if local.x.abs() <= half.x && local.y.abs() <= half.y {
                g.set(c, CellState::Obstacle);
            }
        }
        for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            corners.push(rock.transform_point(Vec2::new(sx * half.x, sy * half.y)));
        }
    }
    (g, corners)
}

/// View of `world` through a `size`×`size` grid whose frame sits at `pose`
/// in world coordinates; cells falling off the world are Unknown.
fn view(world: &GridMap, pose: Pose2D, size: usize) -> GridMap {
    let mut g = GridMap::new(size, size, 1.0, Pose2D::default(), CellState::Unknown).unwrap();
    for i in 0..g.len() {
        let c = g.cell_of(i);
        let p = pose.transform_point(g.cell_center(c));
        if let Ok(wc) = world.world_to_cell(p) {
            g.set(c, world.get(wc));
        }
    }
    g
}

pub fn synthetic_pair(seed: u64) -> SyntheticPair {
    use cisru_sim::fusion::{RigidTransform2D, PATCH};
    use cisru_sim::world::Vec2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (world, corners) = terrain(&mut rng, 140);
    let size = 64;
    let pose_a = Pose2D::new(38.0, 38.0, 0.0);
    loop {
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let center = Vec2::new(
            70.0 + rng.gen_range(-20.0..20.0),
            70.0 + rng.gen_range(-20.0..20.0),
        );
        let half = Vec2::new(size as f64 / 2.0, size as f64 / 2.0);
        let origin = center - half.rotate(theta);
        let pose_b = Pose2D::new(origin.x, origin.y, theta);
        // truth = pose_a⁻¹ ∘ pose_b
        let rel = Pose2D::new(
            pose_a.inverse_transform_point(origin).x,
            pose_a.inverse_transform_point(origin).y,
            theta - pose_a.theta,
        );
        let truth = RigidTransform2D {
            rotation: rel.theta,
            translation: rel.position(),
        };
        let a = view(&world, pose_a, size);
        let b = view(&world, pose_b, size);
        let inside = (0..a.len())
            .filter(|&i| {
                let p = truth.inverse().apply(a.cell_center(a.cell_of(i)));
                b.world_to_cell(p).is_ok()
            })
            .count();
        let overlap = inside as f64 / a.len() as f64;
        // Corners far enough from both borders to carry a full descriptor.
        let interior = |pose: Pose2D, p: Vec2| {
            let q = pose.inverse_transform_point(p);
            let m = PATCH as f64 / 2.0 + 1.0;
            q.x >= m && q.y >= m && q.x <= size as f64 - m && q.y <= size as f64 - m
        };
        let shared = corners
            .iter()
            .filter(|p| interior(pose_a, **p) && interior(pose_b, **p))
            .count();
        if overlap >= 0.4 && shared >= 4 {
            return SyntheticPair {
                a,
                b,
                truth,
                overlap,
            };
        }
    }
}
