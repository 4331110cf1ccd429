mod common;

use cisru_sim::nav::{extract_path, plan_fields, sample_arrival, NavConfig, Stencil};
use cisru_sim::world::{CellIndex, CellState, GridMap, Pose2D};
use common::{corridor_maps, dijkstra_arrival, occupancy_shortest_path, random_grid};

fn max_relative_error(seed: u64, stencil: Stencil) -> f64 {
    let mut g = random_grid(seed, 20, 0.15);
    let goal = CellIndex::new(10, 10);
    g.set(goal, CellState::Free);
    let config = NavConfig {
        stencil,
        ..NavConfig::default()
    };
    let f = plan_fields(&g, g.cell_center(goal), &config).unwrap();
    let oracle = dijkstra_arrival(&f.speed, goal, 1.0);
    let mut worst: f64 = 0.0;
    for (t, d) in f.arrival.values.iter().zip(&oracle) {
        assert_eq!(
            t.is_finite(),
            d.is_finite(),
            "reachability differs on seed {seed}"
        );
        if d.is_finite() && *d > 0.0 {
            worst = worst.max((t - d).abs() / d);
        }
    }
    worst
}

#[test]
fn arrival_time_agrees_with_dijkstra() {
    let worst = (0..30)
        .map(|s| max_relative_error(s, Stencil::Octagonal))
        .fold(0.0, f64::max);
    assert!(worst <= 0.15, "max relative error {worst}");
}

#[test]
fn axial_stencil_is_biased_on_diagonals() {
    // The four-neighbor scheme overestimates diagonal travel noticeably.
    let worst = (0..5)
        .map(|s| max_relative_error(s, Stencil::Axial))
        .fold(0.0, f64::max);
    assert!(worst > 0.15, "max relative error {worst}");
}

#[test]
fn corridor_paths_keep_clearance() {
    let config = NavConfig::default();
    for (i, (rows, start, goal)) in corridor_maps().into_iter().enumerate() {
        let g = GridMap::from_rows(&rows, 1.0, Pose2D::default()).unwrap();
        let f = plan_fields(&g, g.cell_center(goal), &config).unwrap();
        let path = extract_path(
            &f.arrival,
            &f.speed,
            &g,
            g.cell_center(start),
            g.cell_center(goal),
            &config,
        )
        .unwrap();
        let fm_clear: f64 = path
            .points
            .iter()
            .map(|p| f.distance.get(g.world_to_cell(*p).unwrap()))
            .sum::<f64>()
            / path.points.len() as f64;
        let plain = occupancy_shortest_path(&g, start, goal).unwrap();
        let plain_clear: f64 =
            plain.iter().map(|c| f.distance.get(*c)).sum::<f64>() / plain.len() as f64;
        assert!(
            fm_clear >= plain_clear,
            "map {i}: {fm_clear} < {plain_clear}"
        );
        let ts: Vec<f64> = path
            .points
            .iter()
            .map(|p| sample_arrival(&f.arrival, &g, &f.speed, *p))
            .collect();
        assert!(
            ts.windows(2).all(|w| w[1] < w[0]),
            "map {i}: arrival not decreasing"
        );
        assert!(path
            .points
            .iter()
            .all(|p| f.speed.get(g.world_to_cell(*p).unwrap()) > 0.0));
    }
}
