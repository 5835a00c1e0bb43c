//! DBSCAN over precomputed distances and two-stage pseudo-label generation.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::DistanceMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanParams {
    pub eps: f64,
    /// Core-point threshold, counting the point itself.
    pub min_samples: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams {
            eps: 0.6,
            min_samples: 4,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::param(format!("eps = {} must be > 0", self.eps)));
        }
        if self.min_samples < 1 {
            return Err(Error::param("min_samples must be >= 1"));
        }
        Ok(())
    }
}

/// DBSCAN output: a cluster id per sample, `None` for outliers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl Clustering {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn outliers(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i].is_none())
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for c in self.labels.iter().flatten() {
            sizes[*c] += 1;
        }
        sizes
    }

    /// Labels with every outlier in its own singleton group, for partition
    /// comparisons.
    pub fn as_partition(&self) -> Vec<i64> {
        let mut next_outlier = -1i64;
        self.labels
            .iter()
            .map(|l| match l {
                Some(c) => *c as i64,
                None => {
                    next_outlier -= 1;
                    next_outlier
                }
            })
            .collect()
    }
}

/// Standard DBSCAN on a self-distance matrix.
///
/// Cluster ids follow the order in which seeds are found scanning samples by
/// ascending index; a border point joins the first cluster that reaches it.
pub fn dbscan(dist: &DistanceMatrix, params: &DbscanParams) -> Result<Clustering> {
    params.validate()?;
    dist.check_self(1e-5)?;
    let n = dist.rows();
    let eps = params.eps;

    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            dist.row(i)
                .iter()
                .enumerate()
                .filter(|(_, &d)| d as f64 <= eps)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors
        .iter()
        .map(|nb| nb.len() >= params.min_samples)
        .collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if labels[seed].is_some() || !core[seed] {
            continue;
        }
        let cluster = n_clusters;
        n_clusters += 1;
        labels[seed] = Some(cluster);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    Ok(Clustering { labels, n_clusters })
}

/// Pseudo labels: contiguous class ids, some flagged as negatives-only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabeling {
    pub assignment: Vec<Option<usize>>,
    pub negatives_only: Vec<bool>,
    pub n_classes: usize,
}

impl PseudoLabeling {
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_classes];
        for c in self.assignment.iter().flatten() {
            sizes[*c] += 1;
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.negatives_only.len() != self.n_classes {
            return Err(Error::InconsistentBundle(format!(
                "{} flags for {} classes",
                self.negatives_only.len(),
                self.n_classes
            )));
        }
        for (class, size) in self.class_sizes().into_iter().enumerate() {
            if size == 0 || (self.negatives_only[class] && size != 1) {
                return Err(Error::InconsistentBundle(format!(
                    "class {class} has {size} samples"
                )));
            }
        }
        Ok(())
    }

    /// Whether sample `i` belongs to a negatives-only class.
    pub fn is_negative_only(&self, i: usize) -> bool {
        self.assignment[i].is_some_and(|c| self.negatives_only[c])
    }
}

/// Keeps the `n_keep` largest clusters (ties to the smaller cluster id) as
/// classes numbered by descending size. Everything else is unassigned.
pub fn select_top_classes(clustering: &Clustering, n_keep: usize) -> Result<PseudoLabeling> {
    if n_keep < 1 {
        return Err(Error::param("n_keep must be >= 1"));
    }
    let sizes = clustering.cluster_sizes();
    let mut order: Vec<usize> = (0..clustering.n_clusters).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    order.truncate(n_keep);
    let class_of: HashMap<usize, usize> = order
        .iter()
        .enumerate()
        .map(|(class, &cluster)| (cluster, class))
        .collect();

    Ok(PseudoLabeling {
        assignment: clustering
            .labels
            .iter()
            .map(|l| l.and_then(|c| class_of.get(&c).copied()))
            .collect(),
        negatives_only: vec![false; order.len()],
        n_classes: order.len(),
    })
}

/// Where one-sample classes are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingletonPool {
    /// DBSCAN outliers only.
    #[default]
    Outliers,
    /// Outliers plus members of clusters dropped by [`select_top_classes`].
    OutliersAndDiscarded,
}

/// Adds up to `m` one-sample, negatives-only classes.
///
/// Candidates are ranked by distance to their nearest already-assigned sample,
/// most isolated first, ties to the lower index.
pub fn add_singletons(
    base: &PseudoLabeling,
    clustering: &Clustering,
    dist: &DistanceMatrix,
    m: usize,
    pool: SingletonPool,
) -> Result<PseudoLabeling> {
    let n = clustering.len();
    if base.assignment.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} pseudo labels for {} clustered samples",
            base.assignment.len(),
            n
        )));
    }
    if dist.shape() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "{:?} distance matrix for {n} samples",
            dist.shape()
        )));
    }
    if m == 0 {
        return Ok(base.clone());
    }

    let candidates: Vec<usize> = (0..n)
        .filter(|&i| base.assignment[i].is_none())
        .filter(|&i| pool == SingletonPool::OutliersAndDiscarded || clustering.labels[i].is_none())
        .collect();
    let kept: Vec<usize> = (0..n).filter(|&i| base.assignment[i].is_some()).collect();
    let mut ranked: Vec<(f32, usize)> = candidates
        .par_iter()
        .map(|&i| {
            let row = dist.row(i);
            let nearest = kept.iter().map(|&j| row[j]).fold(f32::INFINITY, f32::min);
            (nearest, i)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut out = base.clone();
    for &(_, i) in ranked.iter().take(m) {
        out.assignment[i] = Some(out.n_classes);
        out.negatives_only.push(true);
        out.n_classes += 1;
    }
    Ok(out)
}

/// Adjusted Rand index between two labelings of the same samples.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} labels",
            a.len(),
            b.len()
        )));
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let mut table: HashMap<(i64, i64), u64> = HashMap::new();
    let mut rows: HashMap<i64, u64> = HashMap::new();
    let mut cols: HashMap<i64, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / total;
    let max_index = (sum_rows + sum_cols) / 2.0;
    if max_index == expected {
        // both labelings are all-singletons or a single cluster
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}
