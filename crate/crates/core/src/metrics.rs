//! Chamfer and Earth Mover's distances between point sets.
//!
//! Both operate on `(x, y, t)` coordinates only. EMD is reported in mean
//! form: the optimal bijection's total Euclidean cost divided by the number
//! of points.

use crate::error::{Error, Result};
use crate::event::Point3;

/// Largest set size accepted by [`emd_exact`].
pub const EXACT_EMD_CAP: usize = 512;

fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn dist(a: &Point3, b: &Point3) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Index of the nearest point in `set` to `p` (lowest index on ties) and the
/// squared distance to it.
fn nearest(set: &[Point3], p: &Point3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, q) in set.iter().enumerate() {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_nonempty(x: &[Point3], e: &[Point3]) -> Result<()> {
    if x.is_empty() || e.is_empty() {
        return Err(Error::invalid("chamfer distance of an empty set"));
    }
    Ok(())
}

/// Symmetric Chamfer distance with squared Euclidean terms, each direction
/// averaged over its source set.
pub fn chamfer(x: &[Point3], e: &[Point3]) -> Result<f64> {
    check_nonempty(x, e)?;
    let fwd: f64 = x.iter().map(|p| nearest(e, p).1).sum::<f64>() / x.len() as f64;
    let bwd: f64 = e.iter().map(|q| nearest(x, q).1).sum::<f64>() / e.len() as f64;
    Ok(fwd + bwd)
}

/// Gradient of [`chamfer`] with respect to `x`, treating the nearest
/// neighbor assignment as fixed.
pub fn chamfer_gradient(x: &[Point3], e: &[Point3]) -> Result<Vec<Point3>> {
    check_nonempty(x, e)?;
    let mut grad = vec![[0.0; 3]; x.len()];
    let nx = x.len() as f64;
    let ne = e.len() as f64;
    for (g, p) in grad.iter_mut().zip(x) {
        let q = e[nearest(e, p).0];
        for a in 0..3 {
            g[a] += 2.0 * (p[a] - q[a]) / nx;
        }
    }
    for q in e {
        let k = nearest(x, q).0;
        for a in 0..3 {
            grad[k][a] += 2.0 * (x[k][a] - q[a]) / ne;
        }
    }
    Ok(grad)
}

fn check_same_size(x: &[Point3], e: &[Point3]) -> Result<()> {
    if x.len() != e.len() {
        return Err(Error::invalid(format!(
            "EMD needs equal sizes, got {} and {}",
            x.len(),
            e.len()
        )));
    }
    Ok(())
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix (row-major)
/// via shortest augmenting paths. Returns `col_of_row`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // 1-based potentials; column 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of[j] - 1] = j - 1;
    }
    col_of_row
}

fn cost_matrix(x: &[Point3], e: &[Point3]) -> Vec<f64> {
    x.iter()
        .flat_map(|p| e.iter().map(move |q| dist(p, q)))
        .collect()
}

/// Exact mean-form EMD by solving the assignment problem.
pub fn emd_exact(x: &[Point3], e: &[Point3]) -> Result<f64> {
    check_same_size(x, e)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    if x.len() > EXACT_EMD_CAP {
        return Err(Error::invalid(format!(
            "{} points exceeds the exact EMD cap of {EXACT_EMD_CAP}; use emd_approx",
            x.len()
        )));
    }
    let n = x.len();
    let cost = cost_matrix(x, e);
    let assign = solve_assignment(&cost, n);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

/// Settings for [`emd_approx`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuctionSettings {
    /// Final bidding increment, in cost units per point.
    pub epsilon: f64,
    /// Maximum number of ε-scaling phases.
    pub iters: usize,
}

impl Default for AuctionSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            iters: 12,
        }
    }
}

/// Auction-algorithm estimate of mean-form EMD with ε-scaling.
///
/// Every phase produces a feasible bijection, so the estimate never falls
/// below [`emd_exact`]. A phase run at increment ε ends within `n·ε` of the
/// optimal total cost, i.e. within ε of the mean. The best phase so far is
/// returned, which makes the estimate non-increasing in `iters`.
pub fn emd_approx(x: &[Point3], e: &[Point3], settings: AuctionSettings) -> Result<f64> {
    check_same_size(x, e)?;
    if !(settings.epsilon > 0.0) || settings.iters == 0 {
        return Err(Error::invalid("auction needs epsilon > 0 and iters >= 1"));
    }
    let n = x.len();
    if n == 0 {
        return Ok(0.0);
    }
    let cost = cost_matrix(x, e);
    let max_cost = cost.iter().cloned().fold(0.0, f64::max);
    let mut prices = vec![0.0; n];
    let mut eps = (max_cost / 4.0).max(settings.epsilon);
    let mut best = f64::INFINITY;
    for _ in 0..settings.iters {
        let owner_of = auction_phase(&cost, n, &mut prices, eps);
        let total: f64 = owner_of.iter().enumerate().map(|(j, &i)| cost[i * n + j]).sum();
        best = best.min(total / n as f64);
        if eps <= settings.epsilon {
            break;
        }
        eps = (eps / 5.0).max(settings.epsilon);
    }
    Ok(best)
}

/// One forward-auction phase for minimum cost. Returns `owner_of[object]`.
fn auction_phase(cost: &[f64], n: usize, prices: &mut [f64], eps: f64) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let mut owner_of = vec![NONE; n];
    let mut object_of = vec![NONE; n];
    let mut queue: Vec<usize> = (0..n).rev().collect();
    while let Some(i) = queue.pop() {
        let row = &cost[i * n..(i + 1) * n];
        let mut best_j = 0;
        let mut v1 = f64::NEG_INFINITY;
        let mut v2 = f64::NEG_INFINITY;
        for j in 0..n {
            let val = -row[j] - prices[j];
            if val > v1 {
                v2 = v1;
                v1 = val;
                best_j = j;
            } else if val > v2 {
                v2 = val;
            }
        }
        let increment = if v2.is_finite() { v1 - v2 + eps } else { eps };
        prices[best_j] += increment;
        let prev = owner_of[best_j];
        owner_of[best_j] = i;
        object_of[i] = best_j;
        if prev != NONE {
            object_of[prev] = NONE;
            queue.push(prev);
        }
    }
    owner_of
}

/// EMD using the exact solver up to [`EXACT_EMD_CAP`] points and the auction
/// estimate beyond it.
pub fn emd(x: &[Point3], e: &[Point3]) -> Result<f64> {
    if x.len() <= EXACT_EMD_CAP {
        emd_exact(x, e)
    } else {
        emd_approx(x, e, AuctionSettings::default())
    }
}
