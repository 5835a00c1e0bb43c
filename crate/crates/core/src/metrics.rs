//! Feature normalization, pairwise distances, Re-ID evaluation and
//! distance-matrix fusion.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{DistanceMatrix, EmbeddingSet, SampleMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::param(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

/// Scales every non-zero row to unit L2 norm.
///
/// Returns the normalized set and the number of all-zero rows left untouched.
pub fn l2_normalize(set: &EmbeddingSet) -> (EmbeddingSet, usize) {
    let mut zero_rows = 0;
    let mut features = Vec::with_capacity(set.features().len());
    for row in set.rows() {
        let norm = row
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            zero_rows += 1;
            features.extend_from_slice(row);
        } else {
            features.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
        }
    }
    let out = set
        .with_features(features)
        .expect("normalization preserves shape");
    (out, zero_rows)
}

const LANES: usize = 16;

// Fixed lane layout and reduction tree: the result does not depend on which
// SIMD width the compiler picks, only on the inputs.
#[inline(always)]
fn lane_reduce(acc: [f32; LANES]) -> f32 {
    let mut width = LANES;
    let mut acc = acc;
    while width > 1 {
        width /= 2;
        for k in 0..width {
            acc[k] += acc[k + width];
        }
    }
    acc[0]
}

#[inline(always)]
fn sq_euclidean_body(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    for (k, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        let d = x - y;
        acc[k] += d * d;
    }
    lane_reduce(acc)
}

#[inline(always)]
fn dot_body(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    for (k, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[k] += x * y;
    }
    lane_reduce(acc)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sq_euclidean_avx2(a: &[f32], b: &[f32]) -> f32 {
    sq_euclidean_body(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
    dot_body(a, b)
}

/// Squared Euclidean distance with a fixed summation order.
pub fn squared_euclidean(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2 (checked above).
        return unsafe { sq_euclidean_avx2(a, b) };
    }
    sq_euclidean_body(a, b)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2 (checked above).
        return unsafe { dot_avx2(a, b) };
    }
    dot_body(a, b)
}

// Row chunk handed to one rayon task, and the column tile kept hot in cache.
const ROW_BLOCK: usize = 16;
const COL_TILE: usize = 128;

/// All-pairs distances between the rows of `a` and the rows of `b`.
///
/// Each entry is a pure function of its two rows, so the result is bitwise
/// independent of thread count and of which other rows are present.
pub fn pairwise_distance(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    metric: Metric,
) -> Result<DistanceMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (rows, cols, dim) = (a.len(), b.len(), a.dim());
    let mut values = vec![0.0f32; rows * cols];
    if rows > 0 && cols > 0 {
        let a_norms: Vec<f32>;
        let b_norms: Vec<f32>;
        if metric == Metric::Cosine {
            a_norms = a.rows().map(|r| dot(r, r).sqrt()).collect();
            b_norms = b.rows().map(|r| dot(r, r).sqrt()).collect();
        } else {
            a_norms = Vec::new();
            b_norms = Vec::new();
        }
        let bf = b.features();
        values
            .par_chunks_mut(ROW_BLOCK * cols)
            .enumerate()
            .for_each(|(block, out)| {
                let i0 = block * ROW_BLOCK;
                let n_rows = out.len() / cols;
                for j0 in (0..cols).step_by(COL_TILE) {
                    let j1 = (j0 + COL_TILE).min(cols);
                    for di in 0..n_rows {
                        let i = i0 + di;
                        let x = a.row(i);
                        let out_row = &mut out[di * cols..(di + 1) * cols];
                        for j in j0..j1 {
                            let y = &bf[j * dim..(j + 1) * dim];
                            out_row[j] = match metric {
                                Metric::Euclidean => squared_euclidean(x, y).sqrt(),
                                Metric::Cosine => {
                                    let denom = a_norms[i] * b_norms[j];
                                    if denom == 0.0 {
                                        1.0
                                    } else {
                                        (1.0 - dot(x, y) / denom).max(0.0)
                                    }
                                }
                            };
                        }
                    }
                }
            });
    }
    DistanceMatrix::new(rows, cols, values, a.indices(), b.indices())
}

/// Per-query average precision; `None` when the query had no valid match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query: u64,
    pub ap: Option<f64>,
}

/// mAP and CMC over the included queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    /// `cmc[k - 1]` is the Rank-k accuracy, for k up to the gallery size.
    pub cmc: Vec<f64>,
    pub excluded_queries: usize,
    pub per_query_ap: Vec<QueryAp>,
}

impl EvalReport {
    /// Rank-k accuracy; ranks past the end of the curve saturate.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        match self.cmc.get(k - 1) {
            Some(v) => *v,
            None => self.cmc.last().copied().unwrap_or(0.0),
        }
    }

    pub fn included_queries(&self) -> usize {
        self.per_query_ap.len() - self.excluded_queries
    }
}

fn check_eval_inputs(
    dist: &DistanceMatrix,
    query_meta: &[SampleMeta],
    gallery_meta: &[SampleMeta],
) -> Result<()> {
    if dist.rows() != query_meta.len() || dist.cols() != gallery_meta.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} matrix for {} queries and {} gallery items",
            dist.rows(),
            dist.cols(),
            query_meta.len(),
            gallery_meta.len()
        )));
    }
    let ids_match =
        |ids: &[u64], meta: &[SampleMeta]| ids.iter().zip(meta).all(|(i, m)| *i == m.index);
    if !ids_match(dist.row_ids(), query_meta) || !ids_match(dist.col_ids(), gallery_meta) {
        return Err(Error::ShapeMismatch(
            "distance matrix ids do not match the metadata order".into(),
        ));
    }
    for (side, meta) in [("query", query_meta), ("gallery", gallery_meta)] {
        if let Some(m) = meta.iter().find(|m| m.pid < 0) {
            return Err(Error::UnknownIdentity(format!("{side} index {}", m.index)));
        }
    }
    Ok(())
}

/// Cross-camera retrieval evaluation.
///
/// Gallery items sharing both identity and camera with the query are dropped
/// from its ranking. Ties rank by ascending gallery sample index. Queries with
/// no remaining match are excluded from mAP and CMC.
pub fn evaluate(
    dist: &DistanceMatrix,
    query_meta: &[SampleMeta],
    gallery_meta: &[SampleMeta],
) -> Result<EvalReport> {
    check_eval_inputs(dist, query_meta, gallery_meta)?;
    let n_gallery = gallery_meta.len();

    // (AP, zero-based rank of the first hit) per included query
    let scored: Vec<Option<(f64, usize)>> = (0..query_meta.len())
        .into_par_iter()
        .map(|qi| {
            let q = &query_meta[qi];
            let row = dist.row(qi);
            let mut order: Vec<usize> = (0..n_gallery).collect();
            order.sort_unstable_by(|&a, &b| {
                row[a]
                    .total_cmp(&row[b])
                    .then(gallery_meta[a].index.cmp(&gallery_meta[b].index))
            });
            let mut hits = 0usize;
            let mut precision_sum = 0.0f64;
            let mut first_hit = None;
            let mut rank = 0usize;
            for g in order {
                let gm = &gallery_meta[g];
                if gm.pid == q.pid && gm.camid == q.camid {
                    continue;
                }
                rank += 1;
                if gm.pid == q.pid {
                    hits += 1;
                    precision_sum += hits as f64 / rank as f64;
                    first_hit.get_or_insert(rank - 1);
                }
            }
            first_hit.map(|first| (precision_sum / hits as f64, first))
        })
        .collect();

    let mut first_hit_counts = vec![0usize; n_gallery];
    let mut ap_sum = 0.0f64;
    let mut included = 0usize;
    let mut per_query_ap = Vec::with_capacity(query_meta.len());
    for (q, score) in query_meta.iter().zip(&scored) {
        match score {
            Some((ap, first)) => {
                ap_sum += ap;
                included += 1;
                first_hit_counts[*first] += 1;
                per_query_ap.push(QueryAp {
                    query: q.index,
                    ap: Some(*ap),
                });
            }
            None => per_query_ap.push(QueryAp {
                query: q.index,
                ap: None,
            }),
        }
    }

    let (map, cmc) = if included == 0 {
        (0.0, vec![0.0; n_gallery])
    } else {
        let mut running = 0usize;
        let cmc = first_hit_counts
            .iter()
            .map(|c| {
                running += c;
                running as f64 / included as f64
            })
            .collect();
        (ap_sum / included as f64, cmc)
    };

    Ok(EvalReport {
        map,
        cmc,
        excluded_queries: query_meta.len() - included,
        per_query_ap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionNorm {
    #[default]
    None,
    Minmax,
}

impl FromStr for FusionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionNorm::None),
            "minmax" => Ok(FusionNorm::Minmax),
            other => Err(Error::param(format!(
                "unknown fusion normalization {other:?}"
            ))),
        }
    }
}

/// Weighted-average fusion of distance matrices from several models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub normalize: FusionNorm,
}

impl FusionSpec {
    pub fn uniform(n: usize) -> Self {
        FusionSpec {
            weights: vec![1.0; n],
            normalize: FusionNorm::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("fusion weights must be finite and >= 0"));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::param("at least one fusion weight must be > 0"));
        }
        Ok(())
    }
}

/// `sum_i w_i * norm(M_i) / sum_i w_i`.
///
/// Min-max normalization rescales each input by its own global range; a
/// constant input becomes all zeros.
pub fn fuse_distances(mats: &[DistanceMatrix], spec: &FusionSpec) -> Result<DistanceMatrix> {
    spec.validate()?;
    let first = mats
        .first()
        .ok_or_else(|| Error::param("fusion needs at least one matrix"))?;
    if spec.weights.len() != mats.len() {
        return Err(Error::param(format!(
            "{} weights for {} matrices",
            spec.weights.len(),
            mats.len()
        )));
    }
    if let Some(m) = mats.iter().find(|m| !m.same_layout(first)) {
        return Err(Error::ShapeMismatch(format!(
            "cannot fuse {:?} with {:?}",
            m.shape(),
            first.shape()
        )));
    }

    let ranges: Vec<(f64, f64)> = mats
        .iter()
        .map(|m| match spec.normalize {
            FusionNorm::None => (0.0, 1.0),
            FusionNorm::Minmax => {
                let (lo, hi) = m
                    .values()
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                (lo as f64, (hi - lo) as f64)
            }
        })
        .collect();
    let total: f64 = spec.weights.iter().sum();

    let mut values = vec![0.0f32; first.values().len()];
    values.par_iter_mut().enumerate().for_each(|(idx, out)| {
        let mut acc = 0.0f64;
        for ((m, w), (lo, span)) in mats.iter().zip(&spec.weights).zip(&ranges) {
            let v = m.values()[idx] as f64;
            let normed = match spec.normalize {
                FusionNorm::None => v,
                FusionNorm::Minmax if *span > 0.0 => (v - lo) / span,
                FusionNorm::Minmax => 0.0,
            };
            acc += w * normed;
        }
        *out = (acc / total) as f32;
    });
    first.with_values(values)
}
