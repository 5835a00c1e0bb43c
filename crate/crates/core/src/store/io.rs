//! Bundle directory layout:
//!
//! - `meta.json`: `{"n": .., "dim": .., "dtype": "f32le", "layout": "row-major"}`
//! - `embeddings.bin`: `n * dim` little-endian f32, row-major, no header
//! - `labels.csv`: `index,pid,camid,domain,split,camstyle`
//!
//! Distance matrices live in their own directory as `dist.meta.json`,
//! `dist.bin` and `dist.ids.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DistanceMatrix, EmbeddingSet, SampleMeta};
use crate::error::{Error, Result};

const DTYPE: &str = "f32le";
const LAYOUT: &str = "row-major";
const LABELS_HEADER: [&str; 6] = ["index", "pid", "camid", "domain", "split", "camstyle"];

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    n: usize,
    dim: usize,
    dtype: String,
    layout: String,
}

#[derive(Deserialize)]
struct LabelRow {
    index: u64,
    pid: i64,
    camid: i64,
    domain: String,
    split: String,
    camstyle: u8,
}

#[derive(Serialize, Deserialize)]
struct DistMeta {
    rows: usize,
    cols: usize,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct DistIds {
    row_ids: Vec<u64>,
    col_ids: Vec<u64>,
}

fn encode_f32le(values: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode_f32le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn read_bin(path: &Path, expected_values: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_values * 4 {
        return Err(Error::InconsistentBundle(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected_values * 4
        )));
    }
    Ok(decode_f32le(&bytes))
}

pub fn save_bundle(set: &EmbeddingSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    set.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    write_json(
        &dir.join("meta.json"),
        &BundleMeta {
            n: set.len(),
            dim: set.dim(),
            dtype: DTYPE.into(),
            layout: LAYOUT.into(),
        },
    )?;

    let bin = dir.join("embeddings.bin");
    fs::write(&bin, encode_f32le(set.features())).map_err(|e| Error::io(&bin, e))?;

    let labels = dir.join("labels.csv");
    let csv_err = |source| Error::Csv {
        path: labels.clone(),
        source,
    };
    let mut writer = csv::Writer::from_path(&labels).map_err(csv_err)?;
    writer.write_record(LABELS_HEADER).map_err(csv_err)?;
    for m in set.meta() {
        writer
            .write_record([
                m.index.to_string(),
                m.pid.to_string(),
                m.camid.to_string(),
                m.domain.to_string(),
                m.split.to_string(),
                u8::from(m.camstyle).to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(&labels, e))?;
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let dir = dir.as_ref();
    let meta: BundleMeta = read_json(&dir.join("meta.json"))?;
    if meta.dtype != DTYPE {
        return Err(Error::UnknownDtype(meta.dtype));
    }
    if meta.layout != LAYOUT {
        return Err(Error::InconsistentBundle(format!(
            "unsupported layout {:?}",
            meta.layout
        )));
    }
    let features = read_bin(&dir.join("embeddings.bin"), meta.n * meta.dim)?;

    let labels = dir.join("labels.csv");
    let csv_err = |source| Error::Csv {
        path: labels.clone(),
        source,
    };
    let mut reader = csv::Reader::from_path(&labels).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?;
    if header.iter().ne(LABELS_HEADER) {
        return Err(Error::InconsistentBundle(format!(
            "labels.csv header is {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::with_capacity(meta.n);
    for record in reader.deserialize::<LabelRow>() {
        let row = record.map_err(csv_err)?;
        let camid = u32::try_from(row.camid).map_err(|_| Error::InvalidCameraId(row.camid))?;
        let camstyle = match row.camstyle {
            0 => false,
            1 => true,
            other => {
                return Err(Error::InconsistentBundle(format!(
                    "camstyle must be 0 or 1, got {other}"
                )))
            }
        };
        rows.push(SampleMeta {
            index: row.index,
            pid: row.pid,
            camid,
            domain: row.domain.parse()?,
            split: row.split.parse()?,
            camstyle,
        });
    }
    if rows.len() != meta.n {
        return Err(Error::InconsistentBundle(format!(
            "meta.json says n = {}, labels.csv has {} rows",
            meta.n,
            rows.len()
        )));
    }
    EmbeddingSet::new(features, meta.dim, rows)
}

pub fn save_distance(dist: &DistanceMatrix, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("dist.meta.json"),
        &DistMeta {
            rows: dist.rows(),
            cols: dist.cols(),
            dtype: DTYPE.into(),
        },
    )?;
    let bin = dir.join("dist.bin");
    fs::write(&bin, encode_f32le(dist.values())).map_err(|e| Error::io(&bin, e))?;
    write_json(
        &dir.join("dist.ids.json"),
        &DistIds {
            row_ids: dist.row_ids().to_vec(),
            col_ids: dist.col_ids().to_vec(),
        },
    )
}

pub fn load_distance(dir: impl AsRef<Path>) -> Result<DistanceMatrix> {
    let dir = dir.as_ref();
    let meta: DistMeta = read_json(&dir.join("dist.meta.json"))?;
    if meta.dtype != DTYPE {
        return Err(Error::UnknownDtype(meta.dtype));
    }
    let values = read_bin(&dir.join("dist.bin"), meta.rows * meta.cols)?;
    let ids: DistIds = read_json(&dir.join("dist.ids.json"))?;
    DistanceMatrix::new(meta.rows, meta.cols, values, ids.row_ids, ids.col_ids)
}
