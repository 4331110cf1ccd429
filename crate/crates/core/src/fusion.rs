//! Occupancy-grid merging: corner keypoints on the obstacle mask, rotated
//! binary patch descriptors, brute-force Hamming matching, consensus rigid
//! transform estimation and conservative per-cell fusion.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::world::{CellState, GridMap, Pose2D, Vec2};

/// Patch side of the descriptor, in samples.
pub const PATCH: usize = 16;
const WORDS: usize = PATCH * PATCH / 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub harris_k: f64,
    /// Response threshold relative to the strongest response in the map.
    pub relative_threshold: f64,
    pub ratio: f64,
    pub iterations: usize,
    /// Inlier radius in cells.
    pub inlier_cells: f64,
    pub min_inliers: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            harris_k: 0.04,
            relative_threshold: 0.1,
            ratio: 0.8,
            iterations: 200,
            inlier_cells: 2.0,
            min_inliers: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub col: usize,
    pub row: usize,
    /// Sub-cell peak position relative to the cell center, in cells.
    pub offset: Vec2,
    pub orientation: f64,
    pub response: f64,
}

impl Keypoint {
    /// Peak position in the map's world frame.
    pub fn world(&self, grid: &GridMap) -> Vec2 {
        grid.grid_to_world(Vec2::new(
            self.col as f64 + 0.5 + self.offset.x,
            self.row as f64 + 0.5 + self.offset.y,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor(pub [u64; WORDS]);

impl Descriptor {
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: u32,
}

/// Maps points of map B's world frame into map A's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    pub rotation: f64,
    pub translation: Vec2,
}

impl RigidTransform2D {
    pub const IDENTITY: RigidTransform2D = RigidTransform2D {
        rotation: 0.0,
        translation: Vec2::ZERO,
    };

    pub fn apply(&self, p: Vec2) -> Vec2 {
        p.rotate(self.rotation) + self.translation
    }

    pub fn inverse(&self) -> RigidTransform2D {
        RigidTransform2D {
            rotation: -self.rotation,
            translation: (self.translation * -1.0).rotate(-self.rotation),
        }
    }

    pub fn as_pose(&self) -> Pose2D {
        Pose2D::new(self.translation.x, self.translation.y, self.rotation)
    }
}

/// Cell-grid scalar image; samples outside read as 0.
#[derive(Debug, Clone)]
struct Image {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Image {
    fn at(&self, col: i64, row: i64) -> f64 {
        if col < 0 || row < 0 || col >= self.w as i64 || row >= self.h as i64 {
            0.0
        } else {
            self.v[row as usize * self.w + col as usize]
        }
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (c0, r0) = (x.floor() as i64, y.floor() as i64);
        let (fx, fy) = (x - c0 as f64, y - r0 as f64);
        self.at(c0, r0) * (1.0 - fx) * (1.0 - fy)
            + self.at(c0 + 1, r0) * fx * (1.0 - fy)
            + self.at(c0, r0 + 1) * (1.0 - fx) * fy
            + self.at(c0 + 1, r0 + 1) * fx * fy
    }

    fn convolve_separable(&self, kernel: &[f64]) -> Image {
        let r = (kernel.len() / 2) as i64;
        let mut tmp = vec![0.0; self.v.len()];
        for row in 0..self.h as i64 {
            for col in 0..self.w as i64 {
                let s: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * self.at(col + k as i64 - r, row))
                    .sum();
                tmp[row as usize * self.w + col as usize] = s;
            }
        }
        let tmp = Image {
            w: self.w,
            h: self.h,
            v: tmp,
        };
        let mut out = vec![0.0; self.v.len()];
        for row in 0..self.h as i64 {
            for col in 0..self.w as i64 {
                let s: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * tmp.at(col, row + k as i64 - r))
                    .sum();
                out[row as usize * self.w + col as usize] = s;
            }
        }
        Image {
            w: self.w,
            h: self.h,
            v: out,
        }
    }
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn smoothed_mask(grid: &GridMap) -> Image {
    let mask = Image {
        w: grid.width(),
        h: grid.height(),
        v: grid
            .cells()
            .iter()
            .map(|s| if *s == CellState::Obstacle { 1.0 } else { 0.0 })
            .collect(),
    };
    mask.convolve_separable(&gaussian_kernel(1.0, 2))
}

fn gradients(img: &Image) -> (Image, Image) {
    let mut gx = vec![0.0; img.v.len()];
    let mut gy = vec![0.0; img.v.len()];
    for row in 0..img.h as i64 {
        for col in 0..img.w as i64 {
            let i = row as usize * img.w + col as usize;
            gx[i] = (img.at(col + 1, row) - img.at(col - 1, row)) / 2.0;
            gy[i] = (img.at(col, row + 1) - img.at(col, row - 1)) / 2.0;
        }
    }
    let mk = |v| Image {
        w: img.w,
        h: img.h,
        v,
    };
    (mk(gx), mk(gy))
}

/// Direction from the keypoint to the obstacle mass centroid of a disc.
fn orientation_at(img: &Image, x: f64, y: f64) -> f64 {
    const R: i64 = 6;
    let (c0, r0) = (x.round() as i64, y.round() as i64);
    let (mut sx, mut sy) = (0.0, 0.0);
    for dr in -R..=R {
        for dc in -R..=R {
            let (px, py) = ((c0 + dc) as f64 - x, (r0 + dr) as f64 - y);
            if px * px + py * py > (R * R) as f64 {
                continue;
            }
            let m = img.at(c0 + dc, r0 + dr);
            sx += m * px;
            sy += m * py;
        }
    }
    sy.atan2(sx)
}

/// Harris corners of the obstacle mask with 5×5 non-maximum suppression.
pub fn detect_keypoints(grid: &GridMap, config: &FusionConfig) -> Vec<Keypoint> {
    let img = smoothed_mask(grid);
    let (gx, gy) = gradients(&img);
    let n = img.v.len();
    let prod = |a: &Image, b: &Image| Image {
        w: img.w,
        h: img.h,
        v: (0..n).map(|i| a.v[i] * b.v[i]).collect(),
    };
    let window = gaussian_kernel(1.5, 3);
    let sxx = prod(&gx, &gx).convolve_separable(&window);
    let syy = prod(&gy, &gy).convolve_separable(&window);
    let sxy = prod(&gx, &gy).convolve_separable(&window);
    let response: Vec<f64> = (0..n)
        .map(|i| {
            let det = sxx.v[i] * syy.v[i] - sxy.v[i] * sxy.v[i];
            let tr = sxx.v[i] + syy.v[i];
            det - config.harris_k * tr * tr
        })
        .collect();
    let max = response.iter().copied().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Vec::new();
    }
    let threshold = config.relative_threshold * max;
    let r = Image {
        w: img.w,
        h: img.h,
        v: response,
    };
    let mut out = Vec::new();
    for row in 0..img.h as i64 {
        for col in 0..img.w as i64 {
            let v = r.at(col, row);
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'nms: for dr in -2..=2i64 {
                for dc in -2..=2i64 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let o = r.at(col + dc, row + dr);
                    // Plateaus keep their first cell in row-major order.
                    let earlier = (dr, dc) < (0, 0);
                    if o > v || (o == v && earlier) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                let vertex = |lo: f64, hi: f64| {
                    let curv = lo - 2.0 * v + hi;
                    if curv < 0.0 {
                        ((lo - hi) / (2.0 * curv)).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                };
                let offset = Vec2::new(
                    vertex(r.at(col - 1, row), r.at(col + 1, row)),
                    vertex(r.at(col, row - 1), r.at(col, row + 1)),
                );
                out.push(Keypoint {
                    col: col as usize,
                    row: row as usize,
                    offset,
                    orientation: orientation_at(&img, col as f64 + offset.x, row as f64 + offset.y),
                    response: v,
                });
            }
        }
    }
    out
}

/// Descriptors for every keypoint at least `PATCH/2` cells from the border.
/// Returns the descriptors with the index of their keypoint, and the number
/// of keypoints skipped.
pub fn describe_all(grid: &GridMap, keypoints: &[Keypoint]) -> (Vec<(usize, Descriptor)>, usize) {
    let img = smoothed_mask(grid);
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, kp) in keypoints.iter().enumerate() {
        match describe_with(&img, kp) {
            Some(d) => out.push((i, d)),
            None => skipped += 1,
        }
    }
    (out, skipped)
}

pub fn describe(grid: &GridMap, keypoint: &Keypoint) -> Option<Descriptor> {
    describe_with(&smoothed_mask(grid), keypoint)
}

fn describe_with(img: &Image, kp: &Keypoint) -> Option<Descriptor> {
    let half = PATCH / 2;
    if kp.col < half || kp.row < half || kp.col + half > img.w || kp.row + half > img.h {
        return None;
    }
    let (c, s) = (kp.orientation.cos(), kp.orientation.sin());
    let mut bits = [0u64; WORDS];
    for j in 0..PATCH {
        for i in 0..PATCH {
            let u = i as f64 - (PATCH as f64 - 1.0) / 2.0;
            let v = j as f64 - (PATCH as f64 - 1.0) / 2.0;
            let x = kp.col as f64 + kp.offset.x + c * u - s * v;
            let y = kp.row as f64 + kp.offset.y + s * u + c * v;
            if img.bilinear(x, y) > 0.5 {
                let k = j * PATCH + i;
                bits[k / 64] |= 1 << (k % 64);
            }
        }
    }
    Some(Descriptor(bits))
}

/// Mutual nearest neighbors by Hamming distance that pass the ratio test on
/// both sides.
pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], ratio: f64) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let dist: Vec<Vec<u32>> = a
        .iter()
        .map(|da| b.iter().map(|db| da.hamming(db)).collect())
        .collect();
    let best_of = |row: &mut dyn Iterator<Item = u32>| {
        let mut best = (u32::MAX, usize::MAX);
        let mut second = u32::MAX;
        for (j, d) in row.enumerate() {
            if d < best.0 {
                second = best.0;
                best = (d, j);
            } else if d < second {
                second = d;
            }
        }
        (best, second)
    };
    let passes =
        |best: u32, second: u32| second == u32::MAX || f64::from(best) <= ratio * f64::from(second);
    let mut out = Vec::new();
    for (i, row) in dist.iter().enumerate() {
        let ((d, j), second) = best_of(&mut row.iter().copied());
        if !passes(d, second) {
            continue;
        }
        let ((d_back, i_back), second_back) = best_of(&mut dist.iter().map(|r| r[j]));
        if i_back != i || d_back != d || !passes(d_back, second_back) {
            continue;
        }
        out.push(Match {
            index_a: i,
            index_b: j,
            distance: d,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransformEstimate {
    Found {
        transform: RigidTransform2D,
        inliers: usize,
    },
    InsufficientOverlap,
}

/// Least-squares rigid transform taking `src` onto `dst`.
pub fn fit_rigid(src: &[Vec2], dst: &[Vec2]) -> RigidTransform2D {
    let n = src.len() as f64;
    let cs = src.iter().fold(Vec2::ZERO, |a, p| a + *p) * (1.0 / n);
    let cd = dst.iter().fold(Vec2::ZERO, |a, p| a + *p) * (1.0 / n);
    let (mut sdot, mut scross) = (0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (s, d) = (*s - cs, *d - cd);
        sdot += s.dot(d);
        scross += s.cross(d);
    }
    let rotation = scross.atan2(sdot);
    RigidTransform2D {
        rotation,
        translation: cd - cs.rotate(rotation),
    }
}

/// Consensus over two-match hypotheses, refined by least squares over the
/// inliers. Points are keypoint positions in each map's world frame.
pub fn estimate_transform(
    matches: &[Match],
    points_a: &[Vec2],
    points_b: &[Vec2],
    resolution: f64,
    config: &FusionConfig,
    seed: u64,
) -> TransformEstimate {
    if matches.len() < config.min_inliers.max(2) {
        return TransformEstimate::InsufficientOverlap;
    }
    let radius = config.inlier_cells * resolution;
    let inliers_of = |t: &RigidTransform2D| -> (Vec<usize>, f64) {
        let mut idx = Vec::new();
        let mut err = 0.0;
        for (k, m) in matches.iter().enumerate() {
            let e = t.apply(points_b[m.index_b]).distance(points_a[m.index_a]);
            if e <= radius {
                idx.push(k);
                err += e;
            }
        }
        (idx, err)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..config.iterations {
        let pick = sample(&mut rng, matches.len(), 2);
        let (m1, m2) = (matches[pick.index(0)], matches[pick.index(1)]);
        let (a1, a2) = (points_a[m1.index_a], points_a[m2.index_a]);
        let (b1, b2) = (points_b[m1.index_b], points_b[m2.index_b]);
        let (la, lb) = ((a2 - a1).norm(), (b2 - b1).norm());
        if la < radius || (la - lb).abs() > radius {
            continue;
        }
        let t = fit_rigid(&[b1, b2], &[a1, a2]);
        let (idx, err) = inliers_of(&t);
        let better = match &best {
            None => true,
            Some((bi, be)) => idx.len() > bi.len() || (idx.len() == bi.len() && err < *be),
        };
        if better {
            best = Some((idx, err));
        }
    }
    let Some((mut idx, _)) = best else {
        return TransformEstimate::InsufficientOverlap;
    };
    let mut transform = RigidTransform2D::IDENTITY;
    for _ in 0..3 {
        if idx.len() < config.min_inliers {
            return TransformEstimate::InsufficientOverlap;
        }
        let src: Vec<Vec2> = idx.iter().map(|&k| points_b[matches[k].index_b]).collect();
        let dst: Vec<Vec2> = idx.iter().map(|&k| points_a[matches[k].index_a]).collect();
        transform = fit_rigid(&src, &dst);
        let (next, _) = inliers_of(&transform);
        if next == idx {
            break;
        }
        idx = next;
    }
    if idx.len() < config.min_inliers {
        return TransformEstimate::InsufficientOverlap;
    }
    TransformEstimate::Found {
        transform,
        inliers: idx.len(),
    }
}

/// Full pipeline: keypoints, descriptors, matches and transform from B to A.
pub fn register(a: &GridMap, b: &GridMap, config: &FusionConfig, seed: u64) -> TransformEstimate {
    let (kpa, kpb) = (detect_keypoints(a, config), detect_keypoints(b, config));
    let (da, _) = describe_all(a, &kpa);
    let (db, _) = describe_all(b, &kpb);
    let desc_a: Vec<Descriptor> = da.iter().map(|(_, d)| *d).collect();
    let desc_b: Vec<Descriptor> = db.iter().map(|(_, d)| *d).collect();
    let points_a: Vec<Vec2> = da.iter().map(|(i, _)| kpa[*i].world(a)).collect();
    let points_b: Vec<Vec2> = db.iter().map(|(i, _)| kpb[*i].world(b)).collect();
    let matches = match_descriptors(&desc_a, &desc_b, config.ratio);
    estimate_transform(&matches, &points_a, &points_b, a.resolution(), config, seed)
}

/// B resampled into A's frame by nearest neighbor. Known beats Unknown and
/// an Obstacle/Free conflict resolves to Obstacle; labels follow the state
/// that wins, A's first.
pub fn fuse(a: &GridMap, b: &GridMap, transform: &RigidTransform2D) -> GridMap {
    let mut out = a.clone();
    let inv = transform.inverse();
    for i in 0..a.len() {
        let c = a.cell_of(i);
        let pb = inv.apply(a.cell_center(c));
        let Ok(cb) = b.world_to_cell(pb) else {
            continue;
        };
        let (sa, sb) = (a.get(c), b.get(cb));
        let (la, lb) = (a.label(c), b.label(cb));
        let (state, label) = match (sa, sb) {
            (_, CellState::Unknown) => continue,
            (CellState::Unknown, _) => (sb, lb),
            _ if sa == sb => (sa, la.or(lb)),
            (CellState::Obstacle, _) => (sa, la),
            _ => (sb, lb),
        };
        out.set(c, state);
        out.set_label(c, label);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::CellIndex;

    fn rect_grid(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> GridMap {
        let mut g = GridMap::new(w, h, 1.0, Pose2D::default(), CellState::Free).unwrap();
        for &(c0, r0, c1, r1) in rects {
            for row in r0..=r1 {
                for col in c0..=c1 {
                    g.set(CellIndex::new(col, row), CellState::Obstacle);
                }
            }
        }
        g
    }

    #[test]
    fn free_grid_has_no_keypoints() {
        let g = rect_grid(30, 30, &[]);
        assert!(detect_keypoints(&g, &FusionConfig::default()).is_empty());
    }

    #[test]
    fn rectangle_has_four_corners() {
        let g = rect_grid(30, 30, &[(10, 10, 19, 19)]);
        let kps = detect_keypoints(&g, &FusionConfig::default());
        assert_eq!(kps.len(), 4, "{kps:?}");
        // Brute-force corner test: each mask corner has a keypoint within a cell.
        for (cc, cr) in [(10, 10), (19, 10), (10, 19), (19, 19)] {
            assert!(
                kps.iter()
                    .any(|k| (k.col as i64 - cc).abs() <= 1 && (k.row as i64 - cr).abs() <= 1),
                "corner ({cc},{cr}) missing from {kps:?}"
            );
        }
    }

    #[test]
    fn free_patch_describes_to_zero() {
        let g = rect_grid(30, 30, &[]);
        let kp = Keypoint {
            col: 15,
            row: 15,
            offset: Vec2::ZERO,
            orientation: 0.3,
            response: 1.0,
        };
        assert_eq!(describe(&g, &kp), Some(Descriptor([0; WORDS])));
        let edge = Keypoint { col: 3, ..kp };
        assert_eq!(describe(&g, &edge), None);
    }

    #[test]
    fn matching_identical_sets_is_identity() {
        let g = rect_grid(
            40,
            40,
            &[(8, 8, 15, 20), (22, 10, 30, 14), (20, 25, 32, 31)],
        );
        let c = FusionConfig::default();
        let (d, _) = describe_all(&g, &detect_keypoints(&g, &c));
        let ds: Vec<Descriptor> = d.iter().map(|x| x.1).collect();
        let m = match_descriptors(&ds, &ds, c.ratio);
        assert!(!m.is_empty());
        assert!(m.iter().all(|m| m.index_a == m.index_b && m.distance == 0));
        assert!(match_descriptors(&ds, &[], c.ratio).is_empty());
    }

    #[test]
    fn planted_pair_survives_ratio_test() {
        let base = Descriptor([0; WORDS]);
        let mut near = base;
        near.0[0] = 0b11111;
        let mut far = base;
        far.0 = [u64::MAX, u64::MAX, 0x3_ffff, 0];
        let m = match_descriptors(&[base], &[near, far], 0.8);
        assert_eq!(
            m,
            vec![Match {
                index_a: 0,
                index_b: 0,
                distance: 5
            }]
        );
    }

    #[test]
    fn self_registration_is_identity() {
        let g = rect_grid(
            40,
            40,
            &[(8, 8, 15, 20), (22, 10, 30, 14), (20, 25, 32, 31)],
        );
        match register(&g, &g, &FusionConfig::default(), 1) {
            TransformEstimate::Found { transform, .. } => {
                assert!(transform.rotation.abs() < 0.5f64.to_radians());
                assert!(transform.translation.norm() < 0.25);
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn unrelated_maps_do_not_register() {
        let a = rect_grid(40, 40, &[(8, 8, 15, 20)]);
        let b = rect_grid(40, 40, &[]);
        assert_eq!(
            register(&a, &b, &FusionConfig::default(), 1),
            TransformEstimate::InsufficientOverlap
        );
    }

    #[test]
    fn fit_recovers_exact_transform() {
        let t = RigidTransform2D {
            rotation: 1.1,
            translation: Vec2::new(3.0, -2.0),
        };
        let src = [
            Vec2::new(0.0, 0.0),
            Vec2::new(4.0, 1.0),
            Vec2::new(-2.0, 5.0),
        ];
        let dst: Vec<Vec2> = src.iter().map(|p| t.apply(*p)).collect();
        let f = fit_rigid(&src, &dst);
        assert!((f.rotation - 1.1).abs() < 1e-12);
        assert!(f.translation.distance(t.translation) < 1e-12);
        let back = t.inverse().apply(t.apply(Vec2::new(7.0, 8.0)));
        assert!(back.distance(Vec2::new(7.0, 8.0)) < 1e-12);
    }

    #[test]
    fn fuse_rules() {
        let mut a = rect_grid(4, 1, &[(0, 0, 0, 0)]);
        a.set(CellIndex::new(2, 0), CellState::Unknown);
        a.set(CellIndex::new(3, 0), CellState::Unknown);
        let mut b = rect_grid(4, 1, &[(3, 0, 3, 0)]);
        b.set(CellIndex::new(1, 0), CellState::Unknown);
        let f = fuse(&a, &b, &RigidTransform2D::IDENTITY);
        assert_eq!(f.to_rows(), vec!["#..#".to_string()]);
        assert_eq!(fuse(&a, &a, &RigidTransform2D::IDENTITY), a);
    }
}
