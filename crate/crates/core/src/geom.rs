//! Geometric primitives over unordered 3D point sets.
//!
//! Everything here is brute force: distances are computed against every
//! point. Ties are always broken toward the smallest index so that
//! deterministic results can be compared against naive oracles.

use ndarray::ArrayView2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// How sampling decisions (FPS seed point, neighbor subsets) are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    Deterministic,
    Seeded(u64),
}

impl Sampling {
    /// Derive an independent mode for a sub-computation identified by `path`.
    pub fn derive(self, path: &[u64]) -> Sampling {
        match self {
            Sampling::Deterministic => Sampling::Deterministic,
            Sampling::Seeded(seed) => Sampling::Seeded(rng::derive(seed, path)),
        }
    }
}

/// Neighbors of one anchor within a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub indices: Vec<usize>,
    /// Neighbor minus anchor, one row per entry of `indices`.
    pub displacements: Vec<[f64; 3]>,
    /// True when nothing was inside the radius and the nearest point was used.
    pub clamped: bool,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[inline]
pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn row(points: &ArrayView2<'_, f64>, i: usize) -> [f64; 3] {
    [points[[i, 0]], points[[i, 1]], points[[i, 2]]]
}

fn check_points(points: &ArrayView2<'_, f64>) -> Result<()> {
    if points.ncols() != 3 {
        return Err(Error::invalid(format!("points must be N x 3, got {:?}", points.dim())));
    }
    if points.nrows() == 0 {
        return Err(Error::invalid("empty point set"));
    }
    Ok(())
}

/// Greedy max-min-distance subset of `n_out` distinct indices.
///
/// The first point is the lexicographically smallest coordinate in
/// deterministic mode, uniform in seeded mode.
pub fn farthest_point_sample(
    points: ArrayView2<'_, f64>,
    n_out: usize,
    mode: Sampling,
) -> Result<Vec<usize>> {
    check_points(&points)?;
    let n = points.nrows();
    if n_out < 1 || n_out > n {
        return Err(Error::invalid(format!("cannot sample {n_out} of {n} points")));
    }

    let first = match mode {
        Sampling::Deterministic => (0..n)
            .min_by(|&a, &b| {
                row(&points, a)
                    .partial_cmp(&row(&points, b))
                    .expect("finite coordinates")
                    .then(a.cmp(&b))
            })
            .expect("non-empty"),
        Sampling::Seeded(seed) => rng::rng(seed).gen_range(0..n),
    };

    let mut selected = Vec::with_capacity(n_out);
    selected.push(first);
    let anchor = row(&points, first);
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(row(&points, i), anchor)).collect();
    min_d[first] = f64::NEG_INFINITY;

    while selected.len() < n_out {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            // strict comparison keeps the smallest index on ties
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        selected.push(best);
        let p = row(&points, best);
        min_d[best] = f64::NEG_INFINITY;
        for (i, d) in min_d.iter_mut().enumerate() {
            if *d > f64::NEG_INFINITY {
                *d = d.min(sq_dist(row(&points, i), p));
            }
        }
    }
    Ok(selected)
}

/// Radius-bounded neighbors of `anchor`.
///
/// With `k = Some(K)` the result always holds exactly `K` entries (short
/// neighborhoods are padded by repeating members). With `k = None` every
/// in-radius point is returned once, nearest first. An empty neighborhood
/// falls back to the globally nearest point with `clamped = true`.
pub fn radius_neighbors(
    anchor: [f64; 3],
    points: ArrayView2<'_, f64>,
    r: f64,
    k: Option<usize>,
    mode: Sampling,
) -> Result<NeighborList> {
    check_points(&points)?;
    if !(r > 0.0) {
        return Err(Error::invalid(format!("radius must be positive, got {r}")));
    }
    if k == Some(0) {
        return Err(Error::invalid("neighbor count must be at least 1"));
    }
    let n = points.nrows();
    let r2 = r * r;
    let dists: Vec<f64> = (0..n).map(|i| sq_dist(row(&points, i), anchor)).collect();

    let mut in_radius: Vec<usize> = (0..n).filter(|&i| dists[i] <= r2).collect();
    let nearest_first = |v: &mut Vec<usize>| {
        v.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)))
    };

    let (indices, clamped) = if in_radius.is_empty() {
        let nearest = (0..n)
            .min_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)))
            .expect("non-empty");
        (vec![nearest; k.unwrap_or(1)], true)
    } else {
        let picked = match (k, mode) {
            (None, _) => {
                nearest_first(&mut in_radius);
                in_radius
            }
            (Some(k), Sampling::Deterministic) => {
                nearest_first(&mut in_radius);
                in_radius.iter().copied().cycle().take(k).collect()
            }
            (Some(k), Sampling::Seeded(seed)) => {
                let mut rng = rng::rng(seed);
                let m = in_radius.len();
                if m >= k {
                    let mut chosen: Vec<usize> =
                        index::sample(&mut rng, m, k).into_iter().map(|j| in_radius[j]).collect();
                    chosen.sort_unstable();
                    chosen
                } else {
                    let mut chosen = in_radius.clone();
                    chosen.extend((m..k).map(|_| in_radius[rng.gen_range(0..m)]));
                    chosen
                }
            }
        };
        (picked, false)
    };

    let displacements = indices
        .iter()
        .map(|&i| {
            let p = row(&points, i);
            [p[0] - anchor[0], p[1] - anchor[1], p[2] - anchor[2]]
        })
        .collect();
    Ok(NeighborList { indices, displacements, clamped })
}
