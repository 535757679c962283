//! Brute-force neighborhood kernels over small point sets.

use crate::error::{BicaError, Result};
use crate::numerics::{Real, Tensor};

#[inline]
fn dist2<T: Real>(a: &[T], b: &[T]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min sampling of `k` rows of `xyz[n×3]`, starting at `start`.
/// Ties go to the lowest index.
pub fn farthest_point_sampling<T: Real>(
    xyz: &Tensor<T>,
    k: usize,
    start: usize,
) -> Result<Vec<usize>> {
    let n = xyz.rows();
    if k == 0 || k > n {
        return Err(BicaError::Invalid(format!(
            "cannot sample {k} of {n} points"
        )));
    }
    if start >= n {
        return Err(BicaError::Invalid(format!(
            "start index {start} out of range for {n} points"
        )));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut mind = vec![T::infinity(); n];
    let mut cur = start;
    chosen.push(cur);
    while chosen.len() < k {
        let c = xyz.row(cur);
        let mut best = 0;
        let mut best_d = T::neg_infinity();
        for i in 0..n {
            let d = dist2(xyz.row(i), c);
            if d < mind[i] {
                mind[i] = d;
            }
            if mind[i] > best_d {
                best_d = mind[i];
                best = i;
            }
        }
        cur = best;
        chosen.push(cur);
    }
    Ok(chosen)
}

/// Fixed-size neighborhoods produced by [`ball_query`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BallGroups {
    pub nsample: usize,
    /// `ncenters·nsample` row indices into the queried points.
    pub indices: Vec<usize>,
    /// Number of genuine in-radius hits per center (before padding).
    pub found: Vec<usize>,
    /// Set for centers with no point inside the radius.
    pub empty: Vec<bool>,
}

impl BallGroups {
    pub fn group(&self, c: usize) -> &[usize] {
        &self.indices[c * self.nsample..(c + 1) * self.nsample]
    }
}

/// For every center, up to `nsample` points within `radius` in index order,
/// padded by repeating the first hit. A center with no hit falls back to its
/// nearest point and is flagged empty.
pub fn ball_query<T: Real>(
    centers: &Tensor<T>,
    points: &Tensor<T>,
    radius: f64,
    nsample: usize,
) -> BallGroups {
    assert!(nsample > 0, "nsample must be positive");
    let r2 = T::lit(radius * radius);
    let nc = centers.rows();
    let mut indices = Vec::with_capacity(nc * nsample);
    let mut found = Vec::with_capacity(nc);
    let mut empty = Vec::with_capacity(nc);
    let mut hits = Vec::with_capacity(nsample);
    for c in 0..nc {
        let cr = centers.row(c);
        hits.clear();
        for i in 0..points.rows() {
            if dist2(points.row(i), cr) <= r2 {
                hits.push(i);
                if hits.len() == nsample {
                    break;
                }
            }
        }
        found.push(hits.len());
        if hits.is_empty() {
            let mut best = 0;
            let mut bd = T::infinity();
            for i in 0..points.rows() {
                let d = dist2(points.row(i), cr);
                if d < bd {
                    bd = d;
                    best = i;
                }
            }
            hits.push(best);
            empty.push(true);
        } else {
            empty.push(false);
        }
        let first = hits[0];
        indices.extend_from_slice(&hits);
        indices.extend(std::iter::repeat_n(first, nsample - hits.len()));
    }
    BallGroups {
        nsample,
        indices,
        found,
        empty,
    }
}

/// Indices of the `k` nearest points for every query row (`nq·k`, row-major).
/// Ties go to the lowest index.
pub fn knn<T: Real>(query: &Tensor<T>, points: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(BicaError::Invalid(format!(
            "k={k} out of range for {n} points"
        )));
    }
    let mut out = Vec::with_capacity(query.rows() * k);
    let mut cand: Vec<(T, usize)> = Vec::with_capacity(n);
    for q in 0..query.rows() {
        cand.clear();
        cand.extend((0..n).map(|i| (dist2(points.row(i), query.row(q)), i)));
        // selection by repeated minimum keeps the tie order explicit
        for _ in 0..k {
            let mut bi = 0;
            for j in 1..cand.len() {
                let (d, i) = cand[j];
                let (bd, bidx) = cand[bi];
                if d < bd || (d == bd && i < bidx) {
                    bi = j;
                }
            }
            out.push(cand[bi].1);
            cand.swap_remove(bi);
        }
    }
    Ok(out)
}
