//! k-reciprocal re-ranking.
//!
//! Each sample is encoded as a sparse vector over its expanded k-reciprocal
//! neighborhood (Gaussian kernel weights, rows summing to one), smoothed over
//! its nearest neighbors, and compared with a Jaccard distance. The final
//! distance mixes the Jaccard term with the original distance.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::DistanceMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankParams {
    /// Reciprocal neighborhood size.
    pub k1: usize,
    /// Local query expansion size, counting the sample itself.
    pub k2: usize,
    /// Weight of the original distance in the final mix.
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self, n_total: usize) -> Result<()> {
        if self.k2 < 1 || self.k2 > self.k1 {
            return Err(Error::param(format!(
                "need 1 <= k2 <= k1, got k1 = {}, k2 = {}",
                self.k1, self.k2
            )));
        }
        if self.k1 >= n_total {
            return Err(Error::param(format!(
                "k1 = {} must be smaller than the {n_total} samples",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param(format!(
                "lambda = {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Neighborhood size used when expanding reciprocal sets.
    pub fn half_k1(&self) -> usize {
        (self.k1 / 2).max(1)
    }
}

fn check_square(dist: &DistanceMatrix) -> Result<()> {
    if dist.rows() != dist.cols() || !dist.is_self() {
        return Err(Error::NotSelfMatrix(format!(
            "expected a square matrix over one sample list, got {:?}",
            dist.shape()
        )));
    }
    Ok(())
}

/// The `k` nearest samples to `i`, excluding `i`, nearest first; ties go to
/// the lower index.
fn nearest(dist: &DistanceMatrix, i: usize, k: usize) -> Vec<usize> {
    let row = dist.row(i);
    let by_distance = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
    let mut others: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
    if k < others.len() {
        others.select_nth_unstable_by(k, by_distance);
        others.truncate(k);
    }
    others.sort_unstable_by(by_distance);
    others
}

/// Sorted k-nearest lists of every sample; shorter prefixes give smaller k.
struct NeighborTable {
    lists: Vec<Vec<usize>>,
}

impl NeighborTable {
    fn build(dist: &DistanceMatrix, k: usize) -> Self {
        NeighborTable {
            lists: (0..dist.rows())
                .into_par_iter()
                .map(|i| nearest(dist, i, k))
                .collect(),
        }
    }

    fn knn(&self, i: usize, k: usize) -> &[usize] {
        &self.lists[i][..k]
    }

    /// `{j in N(i,k) : i in N(j,k)}` in neighbor order.
    fn reciprocal(&self, i: usize, k: usize) -> Vec<usize> {
        self.knn(i, k)
            .iter()
            .copied()
            .filter(|&j| self.knn(j, k).contains(&i))
            .collect()
    }

    /// Reciprocal set plus the sample itself, sorted by index.
    fn reciprocal_with_self(&self, i: usize, k: usize) -> Vec<usize> {
        let mut set = self.reciprocal(i, k);
        set.push(i);
        set.sort_unstable();
        set
    }
}

/// `R(i, k1)`: the k-reciprocal neighbors of sample `i`, nearest first.
pub fn k_reciprocal_neighbors(dist: &DistanceMatrix, i: usize, k1: usize) -> Result<Vec<usize>> {
    check_square(dist)?;
    let n = dist.rows();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    if k1 >= n {
        return Err(Error::param(format!(
            "k1 = {k1} must be smaller than n = {n}"
        )));
    }
    let forward = nearest(dist, i, k1);
    Ok(forward
        .into_iter()
        .filter(|&j| nearest(dist, j, k1).contains(&i))
        .collect())
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut x, mut y, mut count) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                x += 1;
                y += 1;
            }
        }
    }
    count
}

type SparseRow = Vec<(usize, f64)>;

/// Kernel-weighted membership vector over the expanded reciprocal set.
fn membership_row(
    dist: &DistanceMatrix,
    table: &NeighborTable,
    i: usize,
    params: &RerankParams,
) -> SparseRow {
    let base = table.reciprocal_with_self(i, params.k1);
    let mut expanded = base.clone();
    for &c in &base {
        let candidate = table.reciprocal_with_self(c, params.half_k1());
        if 3 * sorted_intersection_len(&candidate, &base) >= 2 * candidate.len() {
            expanded.extend_from_slice(&candidate);
        }
    }
    expanded.sort_unstable();
    expanded.dedup();

    let row = dist.row(i);
    let weights: Vec<f64> = expanded.iter().map(|&j| (-(row[j] as f64)).exp()).collect();
    // exp(0) = 1 for the sample itself, so the sum is at least one
    let total: f64 = weights.iter().sum();
    expanded
        .into_iter()
        .zip(weights)
        .map(|(j, w)| (j, w / total))
        .collect()
}

/// Mean of the membership rows of `i` and its `k2 - 1` nearest neighbors.
fn expanded_row(
    memberships: &[SparseRow],
    table: &NeighborTable,
    i: usize,
    k2: usize,
) -> SparseRow {
    let members = std::iter::once(i).chain(table.knn(i, k2 - 1).iter().copied());
    let mut entries: Vec<(usize, f64)> = members
        .flat_map(|m| memberships[m].iter().copied())
        .collect();
    entries.sort_by_key(|e| e.0);
    let mut out: SparseRow = Vec::with_capacity(entries.len());
    for (j, v) in entries {
        match out.last_mut() {
            Some((last, acc)) if *last == j => *acc += v,
            _ => out.push((j, v)),
        }
    }
    for e in &mut out {
        e.1 /= k2 as f64;
    }
    out
}

/// `1 - sum(min) / sum(max)` over the union of supports.
fn jaccard_distance(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut x, mut y) = (0, 0);
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    while x < a.len() || y < b.len() {
        let ja = a.get(x).map_or(usize::MAX, |e| e.0);
        let jb = b.get(y).map_or(usize::MAX, |e| e.0);
        match ja.cmp(&jb) {
            std::cmp::Ordering::Less => {
                hi += a[x].1;
                x += 1;
            }
            std::cmp::Ordering::Greater => {
                hi += b[y].1;
                y += 1;
            }
            std::cmp::Ordering::Equal => {
                lo += a[x].1.min(b[y].1);
                hi += a[x].1.max(b[y].1);
                x += 1;
                y += 1;
            }
        }
    }
    if hi > 0.0 {
        (1.0 - lo / hi).max(0.0)
    } else {
        0.0
    }
}

fn rerank_block(
    dist_all: &DistanceMatrix,
    rows: Range<usize>,
    cols: Range<usize>,
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    check_square(dist_all)?;
    params.validate(dist_all.rows())?;
    let original = dist_all.block(rows.clone(), cols.clone())?;
    if params.lambda == 1.0 {
        return Ok(original);
    }

    let table = NeighborTable::build(dist_all, params.k1);
    let memberships: Vec<SparseRow> = (0..dist_all.rows())
        .into_par_iter()
        .map(|i| membership_row(dist_all, &table, i, params))
        .collect();
    let expanded: Vec<SparseRow> = (0..dist_all.rows())
        .into_par_iter()
        .map(|i| expanded_row(&memberships, &table, i, params.k2))
        .collect();

    let lambda = params.lambda;
    let n_cols = cols.len();
    let mut values = vec![0.0f32; rows.len() * n_cols];
    if n_cols > 0 {
        values
            .par_chunks_mut(n_cols)
            .zip(rows.clone())
            .for_each(|(out, p)| {
                for (slot, g) in out.iter_mut().zip(cols.clone()) {
                    let jaccard = jaccard_distance(&expanded[p], &expanded[g]);
                    let d = dist_all.get(p, g) as f64;
                    *slot = (lambda * d + (1.0 - lambda) * jaccard) as f32;
                }
            });
    }
    original.with_values(values)
}

/// Re-ranks the query x gallery block of a self-distance matrix whose first
/// `n_query` rows are the queries and the rest the gallery.
pub fn rerank(
    dist_all: &DistanceMatrix,
    n_query: usize,
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    let n = dist_all.rows();
    if n_query >= n {
        return Err(Error::param(format!(
            "n_query = {n_query} leaves no gallery among {n} samples"
        )));
    }
    rerank_block(dist_all, 0..n_query, n_query..n, params)
}

/// Re-ranked distances between every pair of samples (used for clustering).
pub fn rerank_all(dist_all: &DistanceMatrix, params: &RerankParams) -> Result<DistanceMatrix> {
    let n = dist_all.rows();
    rerank_block(dist_all, 0..n, 0..n, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, f: impl Fn(usize, usize) -> f32) -> DistanceMatrix {
        let values = (0..n * n).map(|k| f(k / n, k % n)).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        DistanceMatrix::new(n, n, values, ids.clone(), ids).unwrap()
    }

    fn from_points(points: &[(f32, f32)]) -> DistanceMatrix {
        square(points.len(), |i, j| {
            let (a, b) = (points[i], points[j]);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        })
    }

    #[test]
    fn identical_points_are_mutual_neighbors() {
        let d = square(2, |_, _| 0.0);
        assert_eq!(k_reciprocal_neighbors(&d, 0, 1).unwrap(), vec![1]);
        assert_eq!(k_reciprocal_neighbors(&d, 1, 1).unwrap(), vec![0]);
    }

    #[test]
    fn isolated_point_has_empty_reciprocal_set() {
        // Points 0..2 sit close together, point 3 is far from all of them.
        let d = from_points(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.5), (10.0, 10.0)]);
        // brute force: 3 -> {0: 14.14, 1: 13.45, 2: 13.13}, 2 -> {0: 1.5, 1: 1.80}
        assert_eq!(nearest(&d, 3, 1), vec![2]);
        assert_eq!(nearest(&d, 2, 1), vec![0]);
        assert!(k_reciprocal_neighbors(&d, 3, 1).unwrap().is_empty());
        assert_eq!(k_reciprocal_neighbors(&d, 0, 1).unwrap(), vec![1]);
    }

    #[test]
    fn neighbor_errors() {
        let d = square(3, |i, j| (i as f32 - j as f32).abs());
        assert!(matches!(
            k_reciprocal_neighbors(&d, 3, 1),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(k_reciprocal_neighbors(&d, 0, 3).is_err());
        let rect = DistanceMatrix::new(1, 2, vec![0.0, 1.0], vec![0], vec![0, 1]).unwrap();
        assert!(matches!(
            k_reciprocal_neighbors(&rect, 0, 1),
            Err(Error::NotSelfMatrix(_))
        ));
    }

    #[test]
    fn ties_break_by_index() {
        let d = square(4, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(nearest(&d, 2, 2), vec![0, 1]);
        assert_eq!(nearest(&d, 0, 3), vec![1, 2, 3]);
    }

    #[test]
    fn lambda_one_is_bitwise_identity() {
        let d = from_points(&[(0.0, 0.0), (0.3, 0.1), (2.0, 2.0), (2.1, 1.7), (5.0, 0.2)]);
        let params = RerankParams {
            k1: 2,
            k2: 1,
            lambda: 1.0,
        };
        let out = rerank(&d, 2, &params).unwrap();
        assert_eq!(out, d.block(0..2, 2..5).unwrap());
    }

    #[test]
    fn duplicated_query_ranks_first() {
        // query 0 duplicated as gallery point 5, away from cluster boundaries
        let pts = [
            (0.0, 0.0),
            (4.0, 4.0),
            (0.5, 0.1),
            (4.2, 4.1),
            (-0.3, 0.4),
            (0.0, 0.0),
            (3.8, 4.3),
            (0.2, -0.6),
        ];
        let d = from_points(&pts);
        for lambda in [0.0, 0.3, 0.9] {
            let params = RerankParams {
                k1: 3,
                k2: 2,
                lambda,
            };
            let out = rerank(&d, 2, &params).unwrap();
            // gallery column 3 is point 5
            assert_eq!(out.get(0, 3), 0.0, "lambda {lambda}");
            let best = (0..out.cols())
                .min_by(|&a, &b| out.get(0, a).total_cmp(&out.get(0, b)).then(a.cmp(&b)))
                .unwrap();
            assert_eq!(best, 3);
        }
    }

    #[test]
    fn param_validation() {
        let d = square(4, |i, j| (i as f32 - j as f32).abs());
        let bad = [
            RerankParams {
                k1: 4,
                k2: 1,
                lambda: 0.3,
            },
            RerankParams {
                k1: 2,
                k2: 3,
                lambda: 0.3,
            },
            RerankParams {
                k1: 2,
                k2: 0,
                lambda: 0.3,
            },
            RerankParams {
                k1: 2,
                k2: 1,
                lambda: 1.5,
            },
        ];
        for p in bad {
            assert!(rerank(&d, 1, &p).is_err(), "{p:?}");
        }
        assert!(rerank(
            &d,
            4,
            &RerankParams {
                k1: 2,
                k2: 1,
                lambda: 0.3
            }
        )
        .is_err());
    }

    #[test]
    fn jaccard_of_identical_and_disjoint_rows() {
        let a = vec![(0, 0.5), (3, 0.5)];
        let b = vec![(1, 1.0)];
        assert_eq!(jaccard_distance(&a, &a), 0.0);
        assert_eq!(jaccard_distance(&a, &b), 1.0);
        let c = vec![(0, 0.25), (1, 0.75)];
        assert!((jaccard_distance(&a, &c) - (1.0 - 0.25 / 1.75)).abs() < 1e-15);
    }

    #[test]
    fn full_rerank_is_symmetric_with_zero_diagonal() {
        let d = from_points(&[
            (0.0, 0.0),
            (0.3, 0.1),
            (2.0, 2.0),
            (2.1, 1.7),
            (5.0, 0.2),
            (0.1, 0.4),
        ]);
        let out = rerank_all(
            &d,
            &RerankParams {
                k1: 3,
                k2: 2,
                lambda: 0.3,
            },
        )
        .unwrap();
        out.check_self(0.0).unwrap();
    }
}
