//! Camera-bias elimination on features and distance matrices.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{pairwise_distance, Metric};
use crate::store::{DistanceMatrix, EmbeddingSet, SampleMeta};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFixParams {
    /// Neighbors averaged into each feature; 0 disables smoothing.
    pub neighbor_k: usize,
    /// Rate at which the camera distance matrix is subtracted.
    pub cam_dist_rate: f64,
    /// Signed strength of the topology weighting; 0 disables it.
    pub topology_alpha: f64,
}

impl CameraFixParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cam_dist_rate.is_finite() && self.cam_dist_rate >= 0.0) {
            return Err(Error::param("cam_dist_rate must be finite and >= 0"));
        }
        if !self.topology_alpha.is_finite() {
            return Err(Error::param("topology_alpha must be finite"));
        }
        Ok(())
    }
}

/// Subtracts from every row the mean feature of its camera, with the mean
/// taken over all rows of that camera in `set`.
pub fn subtract_camera_mean(set: &EmbeddingSet) -> EmbeddingSet {
    let dim = set.dim();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, m) in set.rows().zip(set.meta()) {
        let (sum, count) = sums.entry(m.camid).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in sum.iter_mut().zip(row) {
            *s += *v as f64;
        }
        *count += 1;
    }
    let means: BTreeMap<u32, Vec<f64>> = sums
        .into_iter()
        .map(|(cam, (sum, count))| (cam, sum.into_iter().map(|s| s / count as f64).collect()))
        .collect();

    let mut features = Vec::with_capacity(set.features().len());
    for (row, m) in set.rows().zip(set.meta()) {
        let mean = &means[&m.camid];
        features.extend(row.iter().zip(mean).map(|(v, mu)| (*v as f64 - mu) as f32));
    }
    set.with_features(features).expect("shape preserved")
}

/// Replaces each row by the mean of itself and its `k` nearest rows
/// (Euclidean, ties to the lower index). Neighbors are always looked up in
/// the input features.
pub fn neighbor_smooth(set: &EmbeddingSet, k: usize) -> Result<EmbeddingSet> {
    if k == 0 {
        return Ok(set.clone());
    }
    let n = set.len();
    if k >= n {
        return Err(Error::param(format!(
            "neighbor_k = {k} must be smaller than n = {n}"
        )));
    }
    let dist = pairwise_distance(set, set, Metric::Euclidean)?;
    let dim = set.dim();
    let mut features = vec![0.0f32; set.features().len()];
    features
        .par_chunks_mut(dim)
        .enumerate()
        .for_each(|(i, out)| {
            let row = dist.row(i);
            let by_distance = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            if k < others.len() {
                others.select_nth_unstable_by(k, by_distance);
                others.truncate(k);
            }
            others.sort_unstable_by(by_distance);

            let mut acc: Vec<f64> = set.row(i).iter().map(|&v| v as f64).collect();
            for &j in &others {
                for (a, v) in acc.iter_mut().zip(set.row(j)) {
                    *a += *v as f64;
                }
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = (a / (k + 1) as f64) as f32;
            }
        });
    set.with_features(features)
}

/// Entrywise mean of camera-model distance matrices.
pub fn mean_camera_distance(mats: &[DistanceMatrix]) -> Result<DistanceMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::param("need at least one camera distance matrix"))?;
    if let Some(m) = mats.iter().find(|m| !m.same_layout(first)) {
        return Err(Error::ShapeMismatch(format!(
            "camera matrices {:?} and {:?} differ",
            m.shape(),
            first.shape()
        )));
    }
    if mats.len() == 1 {
        return Ok(first.clone());
    }
    let count = mats.len() as f64;
    let values = (0..first.values().len())
        .map(|idx| {
            let sum: f64 = mats.iter().map(|m| m.values()[idx] as f64).sum();
            (sum / count) as f32
        })
        .collect();
    first.with_values(values)
}

/// `max(dist - rate * cam_dist, 0)` entrywise.
pub fn subtract_camera_distance(
    dist: &DistanceMatrix,
    cam_dist: &DistanceMatrix,
    rate: f64,
) -> Result<DistanceMatrix> {
    if !dist.same_layout(cam_dist) {
        return Err(Error::ShapeMismatch(format!(
            "distance {:?} vs camera distance {:?}",
            dist.shape(),
            cam_dist.shape()
        )));
    }
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(Error::param(format!(
            "camera distance rate {rate} must be >= 0"
        )));
    }
    if rate == 0.0 {
        return Ok(dist.clone());
    }
    let values = dist
        .values()
        .iter()
        .zip(cam_dist.values())
        .map(|(&d, &c)| ((d as f64 - rate * c as f64) as f32).max(0.0))
        .collect();
    dist.with_values(values)
}

/// Cross-camera co-occurrence of identities.
///
/// `prob[a][b]` is the fraction of identities seen under camera `a` that are
/// also seen under camera `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraTopology {
    n_cameras: usize,
    prob: Vec<f64>,
}

impl CameraTopology {
    pub fn from_matrix(n_cameras: usize, prob: Vec<f64>) -> Result<Self> {
        if prob.len() != n_cameras * n_cameras {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for {n_cameras} cameras",
                prob.len()
            )));
        }
        if prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::param("topology probabilities must lie in [0, 1]"));
        }
        Ok(CameraTopology { n_cameras, prob })
    }

    pub fn n_cameras(&self) -> usize {
        self.n_cameras
    }

    pub fn prob(&self, a: u32, b: u32) -> f64 {
        self.prob[a as usize * self.n_cameras + b as usize]
    }
}

/// Builds the topology from labeled metadata.
///
/// The camera count is `max(camid) + 1` unless `n_cameras` asks for more.
pub fn build_topology(val_meta: &[SampleMeta], n_cameras: Option<usize>) -> Result<CameraTopology> {
    if val_meta.is_empty() {
        return Err(Error::param("topology needs at least one labeled sample"));
    }
    if let Some(m) = val_meta.iter().find(|m| m.pid < 0) {
        return Err(Error::UnknownIdentity(format!(
            "validation index {}",
            m.index
        )));
    }
    let seen = val_meta
        .iter()
        .map(|m| m.camid as usize + 1)
        .max()
        .unwrap_or(0);
    let c = n_cameras.unwrap_or(seen).max(seen);

    let mut cams_of: BTreeMap<i64, BTreeSet<u32>> = BTreeMap::new();
    for m in val_meta {
        cams_of.entry(m.pid).or_default().insert(m.camid);
    }
    let mut both = vec![0usize; c * c];
    let mut under = vec![0usize; c];
    for cams in cams_of.values() {
        for &a in cams {
            under[a as usize] += 1;
            for &b in cams {
                both[a as usize * c + b as usize] += 1;
            }
        }
    }
    let prob = (0..c * c)
        .map(|idx| {
            let a = idx / c;
            if under[a] == 0 {
                0.0
            } else {
                both[idx] as f64 / under[a] as f64
            }
        })
        .collect();
    CameraTopology::from_matrix(c, prob)
}

/// `dist[i][j] * (1 + alpha * prob[cam_i][cam_j])`, clamped at 0.
pub fn apply_topology(
    dist: &DistanceMatrix,
    topo: &CameraTopology,
    query_cams: &[u32],
    gallery_cams: &[u32],
    alpha: f64,
) -> Result<DistanceMatrix> {
    if query_cams.len() != dist.rows() || gallery_cams.len() != dist.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{} row cameras and {} column cameras for a {:?} matrix",
            query_cams.len(),
            gallery_cams.len(),
            dist.shape()
        )));
    }
    if let Some(&c) = query_cams
        .iter()
        .chain(gallery_cams)
        .find(|&&c| c as usize >= topo.n_cameras())
    {
        return Err(Error::InvalidCameraId(c as i64));
    }
    if alpha == 0.0 {
        return Ok(dist.clone());
    }
    let cols = dist.cols();
    let values = dist
        .values()
        .iter()
        .enumerate()
        .map(|(idx, &d)| {
            let w = 1.0 + alpha * topo.prob(query_cams[idx / cols], gallery_cams[idx % cols]);
            ((d as f64 * w) as f32).max(0.0)
        })
        .collect();
    dist.with_values(values)
}
