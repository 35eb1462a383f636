//! Neighborhood queries over event clouds.
//!
//! The cuboid query is a box with half-extent `r` in `x` and `y` and
//! `r * t_scale` along `t`. Box and ball queries go through a uniform grid
//! whose cells match the query extents, so each query visits at most 27
//! cells. Results are always the ascending list of matching indices, cut to
//! `max_k`; an empty neighborhood falls back to the single nearest point.

use crate::error::{Error, Result};
use crate::event::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuboidSpec {
    pub r: f64,
    pub t_scale: f64,
    pub max_k: usize,
}

impl CuboidSpec {
    pub fn new(r: f64, t_scale: f64, max_k: usize) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) || !(t_scale > 0.0 && t_scale.is_finite()) || max_k == 0 {
            return Err(Error::invalid(format!(
                "invalid cuboid spec r={r} t_scale={t_scale} max_k={max_k}"
            )));
        }
        Ok(Self { r, t_scale, max_k })
    }

    pub fn half_extents(&self) -> Point3 {
        [self.r, self.r, self.r * self.t_scale]
    }
}

/// Neighborhood shape used by the grouping layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Grouping {
    Cuboid(CuboidSpec),
    /// Closed Euclidean ball of the given radius.
    Ball { radius: f64, max_k: usize },
}

impl Grouping {
    /// Scale applied to relative offsets before they enter a network.
    pub fn offset_scale(&self) -> Point3 {
        match *self {
            Grouping::Cuboid(c) => c.half_extents().map(|h| 1.0 / h),
            Grouping::Ball { radius, .. } => [1.0 / radius.max(f64::MIN_POSITIVE); 3],
        }
    }
}

fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn scaled_sq_dist(a: &Point3, b: &Point3, inv: &Point3) -> f64 {
    ((a[0] - b[0]) * inv[0]).powi(2)
        + ((a[1] - b[1]) * inv[1]).powi(2)
        + ((a[2] - b[2]) * inv[2]).powi(2)
}

fn in_box(p: &Point3, c: &Point3, h: &Point3) -> bool {
    (p[0] - c[0]).abs() <= h[0] && (p[1] - c[1]).abs() <= h[1] && (p[2] - c[2]).abs() <= h[2]
}

/// Lowest-index point minimizing the (per-axis scaled) squared distance.
fn nearest(points: &[Point3], center: &Point3, inv: &Point3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = scaled_sq_dist(p, center, inv);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// A uniform grid over a fixed point set.
#[derive(Debug, Clone)]
pub struct GridIndex<'a> {
    points: &'a [Point3],
    cell: Point3,
    origin: Point3,
    dims: [usize; 3],
    /// `starts[c]..starts[c + 1]` indexes `order` for cell `c`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

/// Cell budget of a grid, relative to its point count.
const CELLS_PER_POINT: usize = 8;
const MIN_CELLS: usize = 64;

impl<'a> GridIndex<'a> {
    /// Builds an index with (at least) the given cell extents.
    pub fn new(points: &'a [Point3], cell: Point3) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut dims = [1usize; 3];
        let mut cell_out = cell;
        let mut extent = [0.0; 3];
        for a in 0..3 {
            if points.is_empty() {
                lo[a] = 0.0;
                hi[a] = 0.0;
            }
            extent[a] = hi[a] - lo[a];
        }
        let budget = (CELLS_PER_POINT * points.len()).max(MIN_CELLS);
        loop {
            for a in 0..3 {
                let n = (extent[a] / cell_out[a]).floor();
                dims[a] = if !n.is_finite() {
                    1
                } else if n < budget as f64 {
                    n as usize + 1
                } else {
                    budget
                };
            }
            if dims.iter().product::<usize>() <= budget {
                break;
            }
            // Scattered sets would need a huge grid; coarsen the densest axis.
            let a = (0..3).max_by_key(|&a| dims[a]).expect("three axes");
            cell_out[a] *= 2.0;
        }
        for a in 0..3 {
            // Widen cells slightly so the far edge falls in the last cell.
            cell_out[a] = cell_out[a].max(extent[a] / dims[a] as f64 * (1.0 + 1e-12));
            if !(cell_out[a] > 0.0) {
                cell_out[a] = 1.0;
            }
        }
        let ncells = dims[0] * dims[1] * dims[2];
        let mut grid = Self {
            points,
            cell: cell_out,
            origin: lo,
            dims,
            starts: vec![0; ncells + 1],
            order: vec![0; points.len()],
        };
        let ids: Vec<usize> = points.iter().map(|p| grid.cell_of(p)).collect();
        for &c in &ids {
            grid.starts[c + 1] += 1;
        }
        for c in 0..ncells {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in ids.iter().enumerate() {
            grid.order[fill[c]] = i;
            fill[c] += 1;
        }
        grid
    }

    fn axis_cell(&self, v: f64, a: usize) -> usize {
        let c = ((v - self.origin[a]) / self.cell[a]).floor();
        if c <= 0.0 {
            0
        } else {
            (c as usize).min(self.dims[a] - 1)
        }
    }

    fn cell_of(&self, p: &Point3) -> usize {
        let ix = self.axis_cell(p[0], 0);
        let iy = self.axis_cell(p[1], 1);
        let it = self.axis_cell(p[2], 2);
        (it * self.dims[1] + iy) * self.dims[0] + ix
    }

    /// Calls `f` for every point whose cell intersects the box
    /// `center ± half`.
    fn candidates(&self, center: &Point3, half: &Point3, mut f: impl FnMut(usize)) {
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let lo = center[a] - half[a];
            let hi = center[a] + half[a];
            let max = self.origin[a] + self.cell[a] * self.dims[a] as f64;
            if hi < self.origin[a] || lo > max {
                return;
            }
            range[a] = (self.axis_cell(lo, a), self.axis_cell(hi, a));
        }
        for it in range[2].0..=range[2].1 {
            for iy in range[1].0..=range[1].1 {
                let row = (it * self.dims[1] + iy) * self.dims[0];
                let s = self.starts[row + range[0].0];
                let e = self.starts[row + range[0].1 + 1];
                for &i in &self.order[s..e] {
                    f(i);
                }
            }
        }
    }

    /// Ascending indices inside the closed box `center ± half`.
    pub fn box_members(&self, center: &Point3, half: &Point3) -> Vec<usize> {
        let mut out = Vec::new();
        self.candidates(center, half, |i| {
            if in_box(&self.points[i], center, half) {
                out.push(i);
            }
        });
        out.sort_unstable();
        out
    }

    /// Ascending indices inside the closed ball of `radius` around `center`.
    pub fn ball_members(&self, center: &Point3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        self.candidates(center, &[radius; 3], |i| {
            if sq_dist(&self.points[i], center) <= r2 {
                out.push(i);
            }
        });
        out.sort_unstable();
        out
    }
}

/// Reusable neighborhood searcher for one point set and grouping.
#[derive(Debug, Clone)]
pub struct Neighborhoods<'a> {
    points: &'a [Point3],
    grouping: Grouping,
    grid: Option<GridIndex<'a>>,
}

impl<'a> Neighborhoods<'a> {
    pub fn new(points: &'a [Point3], grouping: Grouping) -> Self {
        let grid = match grouping {
            Grouping::Cuboid(c) => Some(GridIndex::new(points, c.half_extents().map(|h| 2.0 * h))),
            Grouping::Ball { radius, .. } if radius > 0.0 => {
                Some(GridIndex::new(points, [2.0 * radius; 3]))
            }
            Grouping::Ball { .. } => None,
        };
        Self {
            points,
            grouping,
            grid,
        }
    }

    pub fn query(&self, center: &Point3) -> Vec<usize> {
        if self.points.is_empty() {
            return Vec::new();
        }
        match self.grouping {
            Grouping::Cuboid(c) => {
                let half = c.half_extents();
                let mut idx = match &self.grid {
                    Some(g) => g.box_members(center, &half),
                    None => unreachable!("cuboid grouping always has a grid"),
                };
                if idx.is_empty() {
                    idx.push(nearest(self.points, center, &half.map(|h| 1.0 / h)));
                }
                idx.truncate(c.max_k);
                idx
            }
            Grouping::Ball { radius, max_k } => {
                let mut idx = match &self.grid {
                    Some(g) => g.ball_members(center, radius),
                    None => (0..self.points.len())
                        .filter(|&i| self.points[i] == *center)
                        .collect(),
                };
                if idx.is_empty() {
                    idx.push(nearest(self.points, center, &[1.0; 3]));
                }
                idx.truncate(max_k);
                idx
            }
        }
    }
}

/// Points within the cuboid around `center`, ascending, at most `max_k`.
pub fn cuboid_query(points: &[Point3], center: &Point3, spec: &CuboidSpec) -> Vec<usize> {
    Neighborhoods::new(points, Grouping::Cuboid(*spec)).query(center)
}

/// Points within the closed Euclidean ball around `center`.
pub fn ball_query(points: &[Point3], center: &Point3, radius: f64, max_k: usize) -> Vec<usize> {
    Neighborhoods::new(points, Grouping::Ball { radius, max_k }).query(center)
}

/// Greedy farthest-point sampling from index 0.
pub fn farthest_point_sample(points: &[Point3], m: usize) -> Result<Vec<usize>> {
    farthest_point_sample_from(points, m, 0)
}

/// Greedy farthest-point sampling starting from `start`. Ties go to the
/// lowest index; the result is in selection order.
pub fn farthest_point_sample_from(points: &[Point3], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("cannot select {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::invalid(format!("start index {start} out of range")));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = start;
    for _ in 0..m {
        selected.push(cur);
        taken[cur] = true;
        let c = points[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(selected)
}

/// Index of the point closest to the centroid (lowest index on ties).
pub fn centroid_nearest(points: &[Point3]) -> usize {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let c = c.map(|v| v / n);
    nearest(points, &c, &[1.0; 3])
}

/// The `k` nearest points to `query` with their Euclidean distances,
/// ascending by distance and then index.
pub fn knn(points: &[Point3], query: &Point3, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!(
            "cannot take {k} neighbors of {} points",
            points.len()
        )));
    }
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        let d = sq_dist(p, query);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, i));
        best.truncate(k);
    }
    Ok(best.into_iter().map(|(d, i)| (i, d.sqrt())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
            .collect()
    }

    #[test]
    fn cuboid_membership_stretches_time() {
        let pts = vec![[0.05, 0.0, 0.12], [0.05, 0.0, 0.16]];
        let spec = CuboidSpec::new(0.1, 1.5, 8).unwrap();
        assert_eq!(cuboid_query(&pts, &[0.0; 3], &spec), vec![0]);
    }

    #[test]
    fn cuboid_fallback_is_anisotropic_nearest() {
        // Point 0 is closer in Euclidean terms, point 1 under the stretched
        // metric.
        let pts = vec![[0.5, 0.0, 0.0], [0.0, 0.0, 0.7]];
        let spec = CuboidSpec::new(0.1, 2.0, 8).unwrap();
        assert_eq!(cuboid_query(&pts, &[0.0; 3], &spec), vec![1]);
    }

    #[test]
    fn cuboid_truncates_to_lowest_indices() {
        let pts = vec![[0.0; 3]; 10];
        let spec = CuboidSpec::new(0.1, 1.0, 3).unwrap();
        assert_eq!(cuboid_query(&pts, &[0.0; 3], &spec), vec![0, 1, 2]);
        assert!(CuboidSpec::new(0.0, 1.0, 1).is_err());
        assert!(CuboidSpec::new(0.1, 1.0, 0).is_err());
    }

    #[test]
    fn unit_t_scale_is_a_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_cloud(&mut rng, 200);
        let spec = CuboidSpec::new(0.2, 1.0, usize::MAX).unwrap();
        for _ in 0..50 {
            let c = random_cloud(&mut rng, 1)[0];
            let cube: Vec<usize> = (0..pts.len())
                .filter(|&i| (0..3).all(|a| (pts[i][a] - c[a]).abs() <= 0.2))
                .collect();
            let got = cuboid_query(&pts, &c, &spec);
            if cube.is_empty() {
                assert_eq!(got.len(), 1);
            } else {
                assert_eq!(got, cube);
            }
        }
    }

    #[test]
    fn ball_boundaries() {
        let pts = vec![[0.0; 3], [0.3, 0.4, 0.0], [0.0, 0.0, 0.0], [1e-9, 0.0, 0.0]];
        assert_eq!(ball_query(&pts, &[0.0; 3], 0.0, 8), vec![0, 2]);
        assert_eq!(ball_query(&pts, &[0.0; 3], 0.5, 8), vec![0, 1, 2, 3]);
        // Nothing at radius 0 around an off-lattice center: nearest fallback.
        assert_eq!(ball_query(&pts, &[0.29, 0.4, 0.0], 0.0, 8), vec![1]);
    }

    #[test]
    fn points_outside_grid_range_are_found() {
        let pts = vec![[-3.0, 0.0, 0.0], [0.0, 0.0, 0.0], [2.5, 2.5, 2.5]];
        let spec = CuboidSpec::new(0.05, 1.0, 8).unwrap();
        assert_eq!(cuboid_query(&pts, &[2.49, 2.5, 2.52], &spec), vec![2]);
        assert_eq!(cuboid_query(&pts, &[9.0, 9.0, 9.0], &spec), vec![2]);
    }

    #[test]
    fn scattered_sets_keep_a_small_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = random_cloud(&mut rng, 64);
        pts.push([1e4, -1e4, 1e4]);
        let grid = GridIndex::new(&pts, [0.01; 3]);
        assert!(grid.dims.iter().product::<usize>() <= 8 * pts.len());
        let spec = CuboidSpec::new(0.3, 1.0, usize::MAX).unwrap();
        for c in &pts[..10] {
            let brute: Vec<usize> = (0..pts.len()).filter(|&i| in_box(&pts[i], c, &[0.3; 3])).collect();
            assert_eq!(cuboid_query(&pts, c, &spec), brute);
        }
    }

    #[test]
    fn fps_basics() {
        let pts = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![0, 1]);
        let mut all = farthest_point_sample(&pts, 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(farthest_point_sample(&pts, 4).is_err());
    }

    #[test]
    fn fps_steps_are_greedy_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=8 {
            for _ in 0..20 {
                let pts = random_cloud(&mut rng, n);
                let sel = farthest_point_sample(&pts, n).unwrap();
                for step in 1..n {
                    let chosen = &sel[..step];
                    // Exhaustive: the minimum distance to the chosen set of
                    // the next pick must be the maximum over remaining points.
                    let score = |i: usize| {
                        chosen.iter().map(|&c| sq_dist(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min)
                    };
                    let best = (0..n).filter(|i| !chosen.contains(i)).map(score).fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(score(sel[step]), best);
                }
            }
        }
    }

    #[test]
    fn knn_basics() {
        let pts = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.5, 0.0, 0.0]];
        assert_eq!(knn(&pts, &[1.0, 0.0, 0.0], 1).unwrap(), vec![(1, 0.0)]);
        let all = knn(&pts, &[0.0; 3], 4).unwrap();
        let idx: Vec<usize> = all.iter().map(|x| x.0).collect();
        assert_eq!(idx, vec![0, 2, 3, 1]);
        assert!(knn(&pts, &[0.0; 3], 5).is_err());
    }

    #[test]
    fn centroid_start() {
        let pts = vec![[1.0, 1.0, 1.0], [0.1, 0.0, 0.0], [-1.0, -1.0, -1.0]];
        assert_eq!(centroid_nearest(&pts), 1);
    }
}
