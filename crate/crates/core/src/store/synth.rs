use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, EmbeddingSet, SampleMeta, Split};
use crate::error::{Error, Result};

/// Parameters of the synthetic identity/camera embedding generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub samples_per_id: usize,
    pub dim: usize,
    pub n_cameras: usize,
    /// Per-coordinate standard deviation of the sample noise.
    pub intra_sigma: f64,
    /// Norm of each camera's additive bias vector.
    pub camera_offset: f64,
    pub seed: u64,
    /// The first `queries_per_id` samples of every identity go to the query
    /// split, the rest to the gallery.
    #[serde(default = "default_queries_per_id")]
    pub queries_per_id: usize,
}

fn default_queries_per_id() -> usize {
    1
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_ids: 100,
            samples_per_id: 8,
            dim: 64,
            n_cameras: 6,
            intra_sigma: 0.4,
            camera_offset: 2.0,
            seed: 7,
            queries_per_id: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids == 0 || self.samples_per_id == 0 || self.dim == 0 || self.n_cameras == 0 {
            return Err(Error::param(
                "n_ids, samples_per_id, dim and n_cameras must all be >= 1",
            ));
        }
        for (name, v) in [
            ("intra_sigma", self.intra_sigma),
            ("camera_offset", self.camera_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.queries_per_id > self.samples_per_id {
            return Err(Error::param("queries_per_id exceeds samples_per_id"));
        }
        Ok(())
    }
}

/// Standard normal deviates from ChaCha8 via the Box-Muller transform.
///
/// Uniforms take the top 53 bits of each `u64` draw, so the stream depends only
/// on the seed and the ChaCha8 keystream.
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        GaussianStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform on `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Rows are `center(pid) + bias(camid) + noise`, identities in order, sample
/// `j` of each identity on camera `j % n_cameras`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<EmbeddingSet> {
    cfg.validate()?;
    let dim = cfg.dim;
    let mut gauss = GaussianStream::new(cfg.seed);

    let centers: Vec<f64> = (0..cfg.n_ids * dim)
        .map(|_| gauss.next_gaussian())
        .collect();

    let mut biases = Vec::with_capacity(cfg.n_cameras * dim);
    for _ in 0..cfg.n_cameras {
        let dir: Vec<f64> = (0..dim).map(|_| gauss.next_gaussian()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            biases.extend(dir.iter().map(|v| v / norm * cfg.camera_offset));
        } else {
            biases.push(cfg.camera_offset);
            biases.extend(std::iter::repeat_n(0.0, dim - 1));
        }
    }

    let n = cfg.n_ids * cfg.samples_per_id;
    let mut features = Vec::with_capacity(n * dim);
    let mut meta = Vec::with_capacity(n);
    for pid in 0..cfg.n_ids {
        let center = &centers[pid * dim..(pid + 1) * dim];
        for j in 0..cfg.samples_per_id {
            let cam = j % cfg.n_cameras;
            let bias = &biases[cam * dim..(cam + 1) * dim];
            for k in 0..dim {
                let noise = gauss.next_gaussian() * cfg.intra_sigma;
                features.push((center[k] + bias[k] + noise) as f32);
            }
            let split = if j < cfg.queries_per_id {
                Split::Query
            } else {
                Split::Gallery
            };
            meta.push(SampleMeta {
                index: meta.len() as u64,
                pid: pid as i64,
                camid: cam as u32,
                domain: Domain::Target,
                split,
                camstyle: false,
            });
        }
    }
    EmbeddingSet::new(features, dim, meta)
}
