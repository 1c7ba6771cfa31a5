//! Optimal-transport structuring: assigning a fixed-size Gaussian set to the
//! cells of a voxel grid and converting between sets and cubes.

mod lap;
mod segmented;

pub use lap::lapjv;
pub use segmented::{morton_encode, morton_key, morton_order, solve_lap_segmented, DEFAULT_SEGMENTS};

use thiserror::Error;

use crate::gaussian::{Aabb, Gaussian, GaussianSet, CHANNELS};
use crate::precision::{round_box, PositionLattice};

pub const DEFAULT_NV: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum OtError {
    #[error("point counts differ: {0} Gaussians vs {1} voxels")]
    CountMismatch(usize, usize),
    #[error("assignment problem is empty")]
    Empty,
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("point {0} has a non-finite coordinate")]
    NonFinitePoint(usize),
    #[error("cost matrix buffer has {len} entries, expected {n}^2")]
    BadMatrix { n: usize, len: usize },
    #[error("{n} points cannot be split into {segments} equal segments")]
    Indivisible { n: usize, segments: usize },
    #[error("set holds {len} Gaussians but the grid has {cells} cells")]
    SizeMismatch { len: usize, cells: usize },
    #[error("assignment is not a bijection onto {0} cells")]
    NotBijection(usize),
    #[error("cube feature buffer has {len} values, expected {expected}")]
    BadFeatures { len: usize, expected: usize },
    #[error("cell {cell} channel {channel} is not finite")]
    NonFiniteFeature { cell: usize, channel: usize },
    #[error("grid resolution must be positive")]
    ZeroResolution,
}

/// Dense row-major square cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self, OtError> {
        if data.len() != n * n {
            return Err(OtError::BadMatrix { n, len: data.len() });
        }
        Ok(Self { n, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// `D[i][j] = |mus[i] - centers[j]|^2`.
pub fn distance_matrix(mus: &[[f64; 3]], centers: &[[f64; 3]]) -> Result<CostMatrix, OtError> {
    if mus.len() != centers.len() {
        return Err(OtError::CountMismatch(mus.len(), centers.len()));
    }
    let data = mus.iter().flat_map(|m| centers.iter().map(move |c| squared_distance(m, c))).collect();
    CostMatrix::new(mus.len(), data)
}

/// Gaussian-to-voxel assignment with its total squared transport distance.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `assignment[k]` is the cell holding Gaussian `k`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

impl TransportPlan {
    pub fn from_points(assignment: Vec<usize>, mus: &[[f64; 3]], centers: &[[f64; 3]]) -> Self {
        let total_cost = assignment.iter().enumerate().map(|(k, &j)| squared_distance(&mus[k], &centers[j])).sum();
        Self { assignment, total_cost }
    }

    pub fn is_bijection(&self) -> bool {
        let n = self.assignment.len();
        let mut seen = vec![false; n];
        self.assignment.iter().all(|&j| j < n && !std::mem::replace(&mut seen[j], true))
    }

    /// Inverse map: `owner[j]` is the Gaussian stored in cell `j`.
    pub fn owners(&self) -> Vec<usize> {
        let mut owner = vec![0; self.assignment.len()];
        for (k, &j) in self.assignment.iter().enumerate() {
            owner[j] = k;
        }
        owner
    }
}

/// Exact minimum-cost assignment of a square cost matrix.
pub fn solve_lap_exact(d: &CostMatrix) -> Result<TransportPlan, OtError> {
    let assignment = lapjv(d)?;
    let total_cost = assignment.iter().enumerate().map(|(i, &j)| d.get(i, j)).sum();
    Ok(TransportPlan { assignment, total_cost })
}

/// Exact assignment between two point sets.
pub fn solve_points_exact(mus: &[[f64; 3]], centers: &[[f64; 3]]) -> Result<TransportPlan, OtError> {
    let d = distance_matrix(mus, centers)?;
    let assignment = lapjv(&d)?;
    Ok(TransportPlan::from_points(assignment, mus, centers))
}

/// Baseline: each Gaussian in index order takes its nearest unused cell.
pub fn greedy_nearest(mus: &[[f64; 3]], centers: &[[f64; 3]]) -> Result<TransportPlan, OtError> {
    if mus.len() != centers.len() {
        return Err(OtError::CountMismatch(mus.len(), centers.len()));
    }
    let mut used = vec![false; centers.len()];
    let mut assignment = Vec::with_capacity(mus.len());
    for m in mus {
        let (best, _) = centers
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, c)| (j, squared_distance(m, c)))
            .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        used[best] = true;
        assignment.push(best);
    }
    Ok(TransportPlan::from_points(assignment, mus, centers))
}

/// Uniform `n_v^3` partition of a box; cells ordered x-fastest, then y, then z.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub n_v: usize,
    pub bounds: Aabb,
    pub centers: Vec<[f64; 3]>,
}

impl VoxelGrid {
    /// Bounds are rounded to single precision and cell midpoints snapped to
    /// their position lattice, so that offsets from them are exact in storage.
    pub fn new(n_v: usize, bounds: Aabb) -> Result<Self, OtError> {
        if n_v == 0 {
            return Err(OtError::ZeroResolution);
        }
        let bounds = round_box(&bounds);
        let lattice = PositionLattice::for_bounds(&bounds);
        let size = bounds.size();
        let mut centers = Vec::with_capacity(n_v * n_v * n_v);
        for z in 0..n_v {
            for y in 0..n_v {
                for x in 0..n_v {
                    let c = [x, y, z];
                    centers.push([0, 1, 2].map(|k| {
                        lattice.snap(bounds.min[k] + (c[k] as f64 + 0.5) * size[k] / n_v as f64)
                    }));
                }
            }
        }
        Ok(Self { n_v, bounds, centers })
    }

    pub fn cells(&self) -> usize {
        self.centers.len()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.n_v + y) * self.n_v + x
    }
}

/// Largest `n_v` with `n_v^3 <= n`.
pub fn cube_root_floor(n: usize) -> usize {
    let mut r = (n as f64).cbrt().round() as usize;
    while r * r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Grid-structured Gaussians stored at single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCube {
    pub n_v: usize,
    pub bounds: Aabb,
    /// `n_v^3 * 14` values, cell-major, channels
    /// `[offset(3), scale(3), rot wxyz(4), opacity, color(3)]`.
    pub features: Vec<f32>,
}

impl GaussianCube {
    pub fn new(n_v: usize, bounds: Aabb, features: Vec<f32>) -> Result<Self, OtError> {
        let expected = n_v * n_v * n_v * CHANNELS;
        if features.len() != expected {
            return Err(OtError::BadFeatures { len: features.len(), expected });
        }
        Ok(Self { n_v, bounds, features })
    }

    pub fn cells(&self) -> usize {
        self.n_v * self.n_v * self.n_v
    }

    pub fn cell(&self, j: usize) -> &[f32] {
        &self.features[j * CHANNELS..(j + 1) * CHANNELS]
    }

    pub fn grid(&self) -> VoxelGrid {
        VoxelGrid::new(self.n_v, self.bounds).expect("cube resolution is positive")
    }
}

pub fn assemble_cube(set: &GaussianSet, grid: &VoxelGrid, plan: &TransportPlan) -> Result<GaussianCube, OtError> {
    if set.len() != grid.cells() {
        return Err(OtError::SizeMismatch { len: set.len(), cells: grid.cells() });
    }
    if plan.assignment.len() != set.len() || !plan.is_bijection() {
        return Err(OtError::NotBijection(grid.cells()));
    }
    let mut features = vec![0.0f32; grid.cells() * CHANNELS];
    for (k, &j) in plan.assignment.iter().enumerate() {
        let g = &set.gaussians[k];
        let mut ch = g.to_channels();
        for a in 0..3 {
            ch[a] = g.mu[a] - grid.centers[j][a];
        }
        for (dst, src) in features[j * CHANNELS..(j + 1) * CHANNELS].iter_mut().zip(ch) {
            *dst = src as f32;
        }
    }
    GaussianCube::new(grid.n_v, grid.bounds, features)
}

/// Out-of-range values that [`devoxelize`] replaced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClampReport {
    /// `(cell, channel)` for every replaced value.
    pub clamped: Vec<(usize, usize)>,
}

impl ClampReport {
    pub fn is_clean(&self) -> bool {
        self.clamped.is_empty()
    }
}

/// Rebuilds one Gaussian per cell, `mu = offset + center`, in cell order.
///
/// Non-positive scales, opacities and colors outside `[0, 1]`, and zero
/// quaternions are replaced by the nearest valid value and reported.
/// Positions are not constrained.
pub fn devoxelize(cube: &GaussianCube) -> Result<(GaussianSet, ClampReport), OtError> {
    if let Some(k) = cube.features.iter().position(|v| !v.is_finite()) {
        return Err(OtError::NonFiniteFeature { cell: k / CHANNELS, channel: k % CHANNELS });
    }
    let grid = cube.grid();
    let mut report = ClampReport::default();
    let mut gaussians = Vec::with_capacity(cube.cells());
    for j in 0..cube.cells() {
        let mut ch = [0.0f64; CHANNELS];
        for (dst, &src) in ch.iter_mut().zip(cube.cell(j)) {
            *dst = src as f64;
        }
        for a in 0..3 {
            ch[a] += grid.centers[j][a];
        }
        for c in 3..6 {
            if ch[c] <= 0.0 {
                ch[c] = f32::MIN_POSITIVE as f64;
                report.clamped.push((j, c));
            }
        }
        if ch[6..10].iter().all(|&v| v == 0.0) {
            ch[6] = 1.0;
            report.clamped.push((j, 6));
        }
        for c in 10..14 {
            let v = ch[c].clamp(0.0, 1.0);
            if v != ch[c] {
                ch[c] = v;
                report.clamped.push((j, c));
            }
        }
        gaussians.push(Gaussian::from_channels(&ch));
    }
    Ok((GaussianSet::new(gaussians, cube.bounds), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn distance_examples() {
        let d = distance_matrix(&[[0.0; 3]], &[[1.0; 3]]).unwrap();
        assert_eq!(d.get(0, 0), 3.0);
        let p = [[0.0, 1.0, 2.0], [3.0, -1.0, 0.5]];
        let d = distance_matrix(&p, &p).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
        assert_eq!(d.get(0, 1), d.get(1, 0));
        assert_eq!(distance_matrix(&p, &p[..1]).unwrap_err(), OtError::CountMismatch(2, 1));
    }

    #[test]
    fn distance_matches_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_points(&mut rng, 5);
        let b = random_points(&mut rng, 5);
        let d = distance_matrix(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let norm = nalgebra::Vector3::from(a[i]) - nalgebra::Vector3::from(b[j]);
                assert!((d.get(i, j) - norm.norm_squared()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_order_is_x_fastest() {
        let g = VoxelGrid::new(2, Aabb::new([0.0; 3], [2.0; 3]).unwrap()).unwrap();
        assert_eq!(g.centers[0], [0.5, 0.5, 0.5]);
        assert_eq!(g.centers[1], [1.5, 0.5, 0.5]);
        assert_eq!(g.centers[2], [0.5, 1.5, 0.5]);
        assert_eq!(g.centers[4], [0.5, 0.5, 1.5]);
        assert_eq!(g.index(1, 1, 1), 7);
        assert_eq!(cube_root_floor(32768), 32);
        assert_eq!(cube_root_floor(63), 3);
    }

    #[test]
    fn single_cell_offsets() {
        let grid = VoxelGrid::new(1, Aabb::unit()).unwrap();
        let plan = TransportPlan { assignment: vec![0], total_cost: 0.0 };
        let mut set = GaussianSet::new(vec![Gaussian::isotropic([0.0; 3], 0.1, 0.5, [0.2; 3])], Aabb::unit());
        let cube = assemble_cube(&set, &grid, &plan).unwrap();
        assert_eq!(&cube.cell(0)[0..3], &[0.0, 0.0, 0.0]);
        set.gaussians[0].mu = [0.1, 0.0, 0.0];
        let cube = assemble_cube(&set, &grid, &plan).unwrap();
        assert_eq!(&cube.cell(0)[0..3], &[0.1, 0.0, 0.0]);
    }

    #[test]
    fn assemble_checks_sizes() {
        let grid = VoxelGrid::new(2, Aabb::unit()).unwrap();
        let set = GaussianSet::new(vec![Gaussian::padding([0.0; 3]); 7], Aabb::unit());
        let plan = TransportPlan { assignment: (0..7).collect(), total_cost: 0.0 };
        assert_eq!(assemble_cube(&set, &grid, &plan).unwrap_err(), OtError::SizeMismatch { len: 7, cells: 8 });
        let set = set.pad_to(8).unwrap();
        let plan = TransportPlan { assignment: vec![0, 0, 1, 2, 3, 4, 5, 6], total_cost: 0.0 };
        assert_eq!(assemble_cube(&set, &grid, &plan).unwrap_err(), OtError::NotBijection(8));
    }

    #[test]
    fn zero_cube_devoxelizes_to_centers() {
        let cube = GaussianCube::new(2, Aabb::unit(), vec![0.0; 8 * CHANNELS]).unwrap();
        let (set, report) = devoxelize(&cube).unwrap();
        assert_eq!(set.len(), 8);
        let grid = cube.grid();
        for (g, c) in set.gaussians.iter().zip(&grid.centers) {
            assert_eq!(g.mu, *c);
            assert_eq!(g.opacity, 0.0);
            assert!(g.scale.iter().all(|&s| s > 0.0));
        }
        assert_eq!(report.clamped.len(), 8 * 4);
    }

    #[test]
    fn devoxelize_allows_far_offsets_and_reports_clamps() {
        let mut f = vec![0.0f32; CHANNELS];
        f[0] = 10.0;
        f[3..6].copy_from_slice(&[0.1, 0.1, 0.1]);
        f[6] = 1.0;
        f[10] = 1.5;
        f[11] = -0.5;
        let cube = GaussianCube::new(1, Aabb::unit(), f).unwrap();
        let (set, report) = devoxelize(&cube).unwrap();
        assert_eq!(set.gaussians[0].mu[0], 10.0);
        assert_eq!(set.gaussians[0].opacity, 1.0);
        assert_eq!(set.gaussians[0].color[0], 0.0);
        assert_eq!(report.clamped, vec![(0, 10), (0, 11)]);
        let mut f = vec![0.0f32; 8 * CHANNELS];
        f[5 * CHANNELS + 12] = f32::NAN;
        let cube = GaussianCube::new(2, Aabb::unit(), f).unwrap();
        assert_eq!(devoxelize(&cube).unwrap_err(), OtError::NonFiniteFeature { cell: 5, channel: 12 });
    }

    #[test]
    fn segmented_with_one_segment_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = random_points(&mut rng, 24);
            let b = random_points(&mut rng, 24);
            let exact = solve_points_exact(&a, &b).unwrap();
            let seg = solve_lap_segmented(&a, &b, 1).unwrap();
            assert!((exact.total_cost - seg.total_cost).abs() <= 1e-12 * exact.total_cost);
            let seg4 = solve_lap_segmented(&a, &b, 4).unwrap();
            assert!(seg4.is_bijection());
            assert!(seg4.total_cost >= exact.total_cost - 1e-12);
        }
    }

    #[test]
    fn greedy_is_bijective_and_no_better_than_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_points(&mut rng, 30);
        let b = random_points(&mut rng, 30);
        let g = greedy_nearest(&a, &b).unwrap();
        assert!(g.is_bijection());
        assert!(g.total_cost >= solve_points_exact(&a, &b).unwrap().total_cost - 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn plans_are_bijections(seed in any::<u64>(), blocks in 1usize..5, per in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = blocks * per;
            let a = random_points(&mut rng, n);
            let b = random_points(&mut rng, n);
            let exact = solve_points_exact(&a, &b).unwrap();
            let seg = solve_lap_segmented(&a, &b, blocks).unwrap();
            prop_assert!(exact.is_bijection());
            prop_assert!(seg.is_bijection());
            prop_assert!(seg.total_cost >= exact.total_cost - 1e-12 * exact.total_cost.max(1.0));
        }

        #[test]
        fn assemble_devoxelize_round_trip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bounds = Aabb::unit();
            let gaussians = (0..8).map(|_| Gaussian {
                mu: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                scale: [rng.random_range(0.01..0.3), rng.random_range(0.01..0.3), rng.random_range(0.01..0.3)],
                rot: [1.0, rng.random_range(-1.0..1.0), 0.3, -0.2],
                opacity: rng.random(),
                color: [rng.random(), rng.random(), rng.random()],
            }.normalized().unwrap()).collect();
            let set = GaussianSet::new(gaussians, bounds);
            let grid = VoxelGrid::new(2, bounds).unwrap();
            let plan = solve_points_exact(&set.positions(), &grid.centers).unwrap();
            let cube = assemble_cube(&set, &grid, &plan).unwrap();
            let (back, report) = devoxelize(&cube).unwrap();
            prop_assert!(report.is_clean());
            for (j, &k) in plan.owners().iter().enumerate() {
                let (a, b) = (set.gaussians[k].to_channels(), back.gaussians[j].to_channels());
                for c in 0..CHANNELS {
                    prop_assert!((a[c] - b[c]).abs() <= 1e-7, "channel {} {} vs {}", c, a[c], b[c]);
                }
            }
        }
    }
}
