//! Embedding-space post-processing for domain adaptive person re-identification.
//!
//! Everything here operates on precomputed feature embeddings:
//!
//! - [`store`]: embedding bundles, distance matrix files, seeded synthetic data.
//! - [`metrics`]: pairwise distances, mAP/CMC evaluation, distance fusion.
//! - [`camera`]: camera-bias elimination on features and distance matrices.
//! - [`rerank`]: k-reciprocal re-ranking with Jaccard distance.
//! - [`pseudo`]: DBSCAN and two-stage pseudo-label generation.
//! - [`trainmath`]: loss values, batch-hard mining, batch composition, LR schedule.
//! - [`pipeline`]: the staged post-processing run and the clustering stage.

pub mod camera;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod pseudo;
pub mod rerank;
pub mod store;
pub mod trainmath;

pub use error::{Error, Result};
pub use store::{DistanceMatrix, Domain, EmbeddingSet, SampleMeta, Split, SynthConfig};
