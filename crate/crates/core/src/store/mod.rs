//! Data model, bundle and distance-matrix file I/O, synthetic fixtures.

mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_bundle, load_distance, save_bundle, save_distance};
pub use synth::{generate_synthetic, GaussianStream, SynthConfig};

/// Feature dimension after the embedding compression layer.
pub const DEFAULT_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::InconsistentBundle(format!(
                "unknown domain {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
    Val,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Query, Split::Gallery, Split::Val];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            "val" => Ok(Split::Val),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

/// Per-row metadata of an [`EmbeddingSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleMeta {
    pub index: u64,
    /// Identity id, `-1` when unknown (target domain only).
    pub pid: i64,
    pub camid: u32,
    pub domain: Domain,
    pub split: Split,
    pub camstyle: bool,
}

impl SampleMeta {
    pub fn new(index: u64, pid: i64, camid: u32) -> Self {
        SampleMeta {
            index,
            pid,
            camid,
            domain: Domain::Target,
            split: Split::Gallery,
            camstyle: false,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_camstyle(mut self, camstyle: bool) -> Self {
        self.camstyle = camstyle;
        self
    }
}

/// An `n x dim` row-major feature matrix with one [`SampleMeta`] per row.
///
/// Immutable once built; every constructor validates the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Vec<f32>,
    dim: usize,
    meta: Vec<SampleMeta>,
}

impl EmbeddingSet {
    pub fn new(features: Vec<f32>, dim: usize, meta: Vec<SampleMeta>) -> Result<Self> {
        let set = EmbeddingSet {
            features,
            dim,
            meta,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingSet {
            features: Vec::new(),
            dim,
            meta: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InconsistentBundle("dim must be >= 1".into()));
        }
        if self.features.len() != self.meta.len() * self.dim {
            return Err(Error::InconsistentBundle(format!(
                "{} feature values for {} meta rows of dim {}",
                self.features.len(),
                self.meta.len(),
                self.dim
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.meta.len());
        for m in &self.meta {
            if m.pid < -1 || (m.pid == -1 && m.domain != Domain::Target) {
                return Err(Error::InconsistentBundle(format!(
                    "row {} has pid {} in the {} domain",
                    m.index, m.pid, m.domain
                )));
            }
            if !seen.insert(m.index) {
                return Err(Error::InconsistentBundle(format!(
                    "duplicate index {}",
                    m.index
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.features.chunks_exact(self.dim)
    }

    pub fn indices(&self) -> Vec<u64> {
        self.meta.iter().map(|m| m.index).collect()
    }

    pub fn camids(&self) -> Vec<u32> {
        self.meta.iter().map(|m| m.camid).collect()
    }

    /// Same metadata, new feature values of identical shape.
    pub fn with_features(&self, features: Vec<f32>) -> Result<Self> {
        if features.len() != self.features.len() {
            return Err(Error::DimensionMismatch {
                left: features.len(),
                right: self.features.len(),
            });
        }
        Ok(EmbeddingSet {
            features,
            dim: self.dim,
            meta: self.meta.clone(),
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut meta = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            meta.push(self.meta[r]);
        }
        EmbeddingSet {
            features,
            dim: self.dim,
            meta,
        }
    }

    /// Rows belonging to `split`, in their original order.
    pub fn select_split(&self, split: Split) -> Self {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| self.meta[i].split == split)
            .collect();
        self.select_rows(&rows)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut meta = self.meta.clone();
        meta.extend_from_slice(&other.meta);
        EmbeddingSet::new(features, self.dim, meta)
    }
}

/// Named-split selection; fails on anything outside train/query/gallery/val.
pub fn select_split(set: &EmbeddingSet, split: &str) -> Result<EmbeddingSet> {
    Ok(set.select_split(split.parse()?))
}

/// A `rows x cols` matrix of non-negative distances, row-major.
///
/// `row_ids` and `col_ids` carry the [`SampleMeta::index`] of each side.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    row_ids: Vec<u64>,
    col_ids: Vec<u64>,
}

impl DistanceMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f32>,
        row_ids: Vec<u64>,
        col_ids: Vec<u64>,
    ) -> Result<Self> {
        if values.len() != rows * cols || row_ids.len() != rows || col_ids.len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values, {} row ids, {} col ids for a {rows}x{cols} matrix",
                values.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::ShapeMismatch(format!(
                "entry ({}, {}) = {} is not a finite non-negative distance",
                pos / cols.max(1),
                pos % cols.max(1),
                values[pos]
            )));
        }
        Ok(DistanceMatrix {
            rows,
            cols,
            values,
            row_ids,
            col_ids,
        })
    }

    /// Same ids, new values; negatives and non-finite values are rejected.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        DistanceMatrix::new(
            self.rows,
            self.cols,
            values,
            self.row_ids.clone(),
            self.col_ids.clone(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row_ids(&self) -> &[u64] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[u64] {
        &self.col_ids
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// True when rows and columns index the same samples in the same order.
    pub fn is_self(&self) -> bool {
        self.row_ids == self.col_ids
    }

    pub fn same_layout(&self, other: &DistanceMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.row_ids == other.row_ids
            && self.col_ids == other.col_ids
    }

    /// Checks the self-matrix invariants: zero diagonal, symmetric within `tol`.
    pub fn check_self(&self, tol: f32) -> Result<()> {
        if !self.is_self() {
            return Err(Error::NotSelfMatrix(
                "row ids differ from column ids".into(),
            ));
        }
        for i in 0..self.rows {
            if self.get(i, i) != 0.0 {
                return Err(Error::NotSelfMatrix(format!(
                    "diagonal entry {i} is {}",
                    self.get(i, i)
                )));
            }
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return Err(Error::NotSelfMatrix(format!(
                        "entries ({i}, {j}) and ({j}, {i}) differ"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copy of the sub-block `row_range x col_range`.
    pub fn block(
        &self,
        row_range: std::ops::Range<usize>,
        col_range: std::ops::Range<usize>,
    ) -> Result<Self> {
        if row_range.end > self.rows || col_range.end > self.cols {
            return Err(Error::ShapeMismatch(format!(
                "block {row_range:?}x{col_range:?} outside a {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let mut values = Vec::with_capacity(row_range.len() * col_range.len());
        for i in row_range.clone() {
            values.extend_from_slice(&self.row(i)[col_range.clone()]);
        }
        Ok(DistanceMatrix {
            rows: row_range.len(),
            cols: col_range.len(),
            values,
            row_ids: self.row_ids[row_range].to_vec(),
            col_ids: self.col_ids[col_range].to_vec(),
        })
    }
}
