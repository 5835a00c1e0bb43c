//! Staged post-processing run and the pseudo-label clustering stage.
//!
//! `run_pipeline` evaluates the untouched features as a baseline, then
//! applies, per model and in this fixed order: L2
//! normalization, camera mean subtraction, neighbor smoothing, distance
//! computation, camera distance subtraction, topology weighting and
//! re-ranking; then fuses the models and evaluates. Every enabled stage
//! writes its query x gallery distance matrix and an evaluation report, so
//! the output directory reads as a cumulative ablation ladder.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{
    apply_topology, build_topology, mean_camera_distance, neighbor_smooth,
    subtract_camera_distance, subtract_camera_mean,
};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, fuse_distances, l2_normalize, pairwise_distance, EvalReport, FusionSpec, Metric,
};
use crate::pseudo::{
    add_singletons, adjusted_rand_index, dbscan, select_top_classes, Clustering, DbscanParams,
    PseudoLabeling, SingletonPool,
};
use crate::rerank::{rerank, rerank_all, RerankParams};
use crate::store::{
    load_bundle, load_distance, save_bundle, save_distance, DistanceMatrix, Domain, EmbeddingSet,
    Split,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageParams {
    pub normalize: bool,
    pub metric: Metric,
    pub camera_mean: bool,
    pub neighbor_k: usize,
    pub cam_dist_rate: f64,
    pub topology_alpha: f64,
    /// Re-ranking runs when present.
    pub rerank: Option<RerankParams>,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams {
            normalize: false,
            metric: Metric::Euclidean,
            camera_mean: false,
            neighbor_k: 0,
            cam_dist_rate: 0.0,
            topology_alpha: 0.0,
            rerank: None,
        }
    }
}

/// Per-model replacements for individual stage parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageOverrides {
    pub normalize: Option<bool>,
    pub metric: Option<Metric>,
    pub camera_mean: Option<bool>,
    pub neighbor_k: Option<usize>,
    pub cam_dist_rate: Option<f64>,
    pub topology_alpha: Option<f64>,
    pub rerank: Option<RerankParams>,
}

impl StageParams {
    fn with_overrides(&self, o: &StageOverrides) -> StageParams {
        StageParams {
            normalize: o.normalize.unwrap_or(self.normalize),
            metric: o.metric.unwrap_or(self.metric),
            camera_mean: o.camera_mean.unwrap_or(self.camera_mean),
            neighbor_k: o.neighbor_k.unwrap_or(self.neighbor_k),
            cam_dist_rate: o.cam_dist_rate.unwrap_or(self.cam_dist_rate),
            topology_alpha: o.topology_alpha.unwrap_or(self.topology_alpha),
            rerank: o.rerank.or(self.rerank),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInput {
    /// Embedding bundle with query and gallery rows.
    pub bundle: PathBuf,
    #[serde(default)]
    pub overrides: StageOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub models: Vec<ModelInput>,
    /// Camera-model distance bundles over query ++ gallery (self matrices).
    #[serde(default)]
    pub camera_dist_bundles: Vec<PathBuf>,
    /// Labeled bundle the camera topology is estimated from.
    #[serde(default)]
    pub val_bundle: Option<PathBuf>,
    #[serde(default)]
    pub stages: StageParams,
    /// Defaults to equal weights without normalization.
    #[serde(default)]
    pub fusion: Option<FusionSpec>,
    pub out_dir: PathBuf,
    /// Recorded in the run summary; no stage draws random numbers.
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: PathBuf::from("<config>"),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::param("at least one model bundle is required"));
        }
        let paths = self
            .models
            .iter()
            .map(|m| &m.bundle)
            .chain(&self.camera_dist_bundles)
            .chain(self.val_bundle.as_ref());
        for p in paths {
            if !p.exists() {
                return Err(Error::param(format!("{} does not exist", p.display())));
            }
        }
        for m in &self.models {
            let params = self.stages.with_overrides(&m.overrides);
            if !(params.cam_dist_rate.is_finite() && params.cam_dist_rate >= 0.0) {
                return Err(Error::param("cam_dist_rate must be >= 0"));
            }
            if !params.topology_alpha.is_finite() {
                return Err(Error::param("topology_alpha must be finite"));
            }
            if params.cam_dist_rate > 0.0 && self.camera_dist_bundles.is_empty() {
                return Err(Error::param("cam_dist_rate > 0 needs camera_dist_bundles"));
            }
            if params.topology_alpha != 0.0 && self.val_bundle.is_none() {
                return Err(Error::param("topology_alpha != 0 needs val_bundle"));
            }
        }
        if let Some(f) = &self.fusion {
            f.validate()?;
            if f.weights.len() != self.models.len() {
                return Err(Error::param(format!(
                    "{} fusion weights for {} models",
                    f.weights.len(),
                    self.models.len()
                )));
            }
        }
        Ok(())
    }
}

/// Query rows followed by gallery rows of a bundle.
#[derive(Debug, Clone)]
pub struct TestView {
    pub set: EmbeddingSet,
    pub n_query: usize,
}

impl TestView {
    pub fn from_set(set: &EmbeddingSet) -> Result<Self> {
        let query = set.select_split(Split::Query);
        let gallery = set.select_split(Split::Gallery);
        if query.is_empty() || gallery.is_empty() {
            return Err(Error::InsufficientSamples(format!(
                "bundle has {} query and {} gallery rows",
                query.len(),
                gallery.len()
            )));
        }
        Ok(TestView {
            n_query: query.len(),
            set: query.concat(&gallery)?,
        })
    }

    pub fn query(&self) -> EmbeddingSet {
        self.set.select_rows(&(0..self.n_query).collect::<Vec<_>>())
    }

    pub fn gallery(&self) -> EmbeddingSet {
        self.set
            .select_rows(&(self.n_query..self.set.len()).collect::<Vec<_>>())
    }

    fn with_set(&self, set: EmbeddingSet) -> Self {
        TestView {
            set,
            n_query: self.n_query,
        }
    }

    /// Query x gallery block of a self matrix over this view.
    pub fn block(&self, full: &DistanceMatrix) -> Result<DistanceMatrix> {
        full.block(0..self.n_query, self.n_query..full.cols())
    }

    pub fn evaluate(&self, qg: &DistanceMatrix) -> Result<EvalReport> {
        let meta = self.set.meta();
        evaluate(qg, &meta[..self.n_query], &meta[self.n_query..])
    }
}

/// Summary line of one evaluated stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Model position in the config, `None` for the fused result.
    pub model: Option<usize>,
    pub stage: String,
    pub artifact: PathBuf,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stages: Vec<StageRecord>,
    pub final_dist: DistanceMatrix,
    pub final_report: EvalReport,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    stages: &'a [StageRecord],
    final_map: f64,
    final_rank1: f64,
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn stage_err(stage: &str, source: Error) -> Error {
    Error::Stage {
        stage: stage.to_string(),
        source: Box::new(source),
    }
}

struct Run<'a> {
    out: &'a Path,
    records: Vec<StageRecord>,
}

impl Run<'_> {
    /// Writes the stage's distance matrix and report, records the ladder row.
    fn emit(
        &mut self,
        model: Option<usize>,
        stage: &str,
        view: &TestView,
        qg: &DistanceMatrix,
    ) -> Result<EvalReport> {
        let dir = match model {
            Some(m) => self.out.join(format!("model_{m}")).join(stage),
            None => self.out.join(stage),
        };
        let report = view.evaluate(qg)?;
        save_distance(qg, &dir)?;
        write_report(&dir.join("report.json"), &report)?;
        self.records.push(StageRecord {
            model,
            stage: stage.to_string(),
            artifact: dir,
            map: report.map,
            rank1: report.rank(1),
            rank5: report.rank(5),
            rank10: report.rank(10),
        });
        Ok(report)
    }

    fn emit_features(
        &mut self,
        model: usize,
        stage: &str,
        view: &TestView,
        metric: Metric,
    ) -> Result<()> {
        let qg = pairwise_distance(&view.query(), &view.gallery(), metric)?;
        self.emit(Some(model), stage, view, &qg)?;
        save_bundle(
            &view.set,
            self.out
                .join(format!("model_{model}"))
                .join(stage)
                .join("features"),
        )
    }
}

struct SharedInputs {
    cam_dist: Option<DistanceMatrix>,
    val: Option<EmbeddingSet>,
}

fn run_model(
    run: &mut Run<'_>,
    model: usize,
    view: TestView,
    params: &StageParams,
    shared: &SharedInputs,
) -> Result<DistanceMatrix> {
    let mut view = view;

    let stage = "00_raw";
    let raw = pairwise_distance(&view.query(), &view.gallery(), params.metric)
        .map_err(|e| stage_err(stage, e))?;
    run.emit(Some(model), stage, &view, &raw)
        .map_err(|e| stage_err(stage, e))?;

    if params.normalize {
        let stage = "01_normalize";
        let (set, _zero_rows) = l2_normalize(&view.set);
        view = view.with_set(set);
        run.emit_features(model, stage, &view, params.metric)
            .map_err(|e| stage_err(stage, e))?;
    }
    if params.camera_mean {
        let stage = "02_camera_mean";
        view = view.with_set(subtract_camera_mean(&view.set));
        run.emit_features(model, stage, &view, params.metric)
            .map_err(|e| stage_err(stage, e))?;
    }
    if params.neighbor_k > 0 {
        let stage = "03_neighbor_smooth";
        let set = neighbor_smooth(&view.set, params.neighbor_k).map_err(|e| stage_err(stage, e))?;
        view = view.with_set(set);
        run.emit_features(model, stage, &view, params.metric)
            .map_err(|e| stage_err(stage, e))?;
    }

    let stage = "04_distance";
    let mut full =
        pairwise_distance(&view.set, &view.set, params.metric).map_err(|e| stage_err(stage, e))?;
    let mut qg = view.block(&full).map_err(|e| stage_err(stage, e))?;
    run.emit(Some(model), stage, &view, &qg)
        .map_err(|e| stage_err(stage, e))?;

    if params.cam_dist_rate > 0.0 {
        let stage = "05_camera_distance";
        let result = (|| {
            let cam = shared
                .cam_dist
                .as_ref()
                .ok_or_else(|| Error::param("no camera distance bundles"))?;
            full = subtract_camera_distance(&full, cam, params.cam_dist_rate)?;
            qg = view.block(&full)?;
            run.emit(Some(model), stage, &view, &qg)
        })();
        result.map_err(|e| stage_err(stage, e))?;
    }

    if params.topology_alpha != 0.0 {
        let stage = "06_topology";
        let result = (|| {
            let val = shared
                .val
                .as_ref()
                .ok_or_else(|| Error::param("no validation bundle"))?;
            let cams = view.set.camids();
            let n_cams = cams.iter().map(|c| *c as usize + 1).max().unwrap_or(0);
            let labeled: Vec<_> = val.meta().iter().filter(|m| m.pid >= 0).copied().collect();
            let topo = build_topology(&labeled, Some(n_cams))?;
            full = apply_topology(&full, &topo, &cams, &cams, params.topology_alpha)?;
            qg = view.block(&full)?;
            run.emit(Some(model), stage, &view, &qg)
        })();
        result.map_err(|e| stage_err(stage, e))?;
    }

    if let Some(rr) = &params.rerank {
        let stage = "07_rerank";
        let result = (|| {
            qg = rerank(&full, view.n_query, rr)?;
            run.emit(Some(model), stage, &view, &qg)
        })();
        result.map_err(|e| stage_err(stage, e))?;
    }

    Ok(qg)
}

fn clear_previous(out: &Path) -> Result<()> {
    let Ok(entries) = fs::read_dir(out) else {
        return Ok(());
    };
    for entry in entries.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let ours = name.starts_with("model_")
            || name == "08_fusion"
            || name == "report.json"
            || name == "summary.json"
            || name == "failed";
        if ours {
            let path = entry.path();
            let removed = if path.is_dir() {
                fs::remove_dir_all(&path)
            } else {
                fs::remove_file(&path)
            };
            removed.map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn quarantine(out: &Path) {
    let failed = out.join("failed");
    if fs::create_dir_all(&failed).is_err() {
        return;
    }
    if let Ok(entries) = fs::read_dir(out) {
        for entry in entries.flatten() {
            if entry.file_name() != "failed" {
                let _ = fs::rename(entry.path(), failed.join(entry.file_name()));
            }
        }
    }
}

/// Runs every enabled stage, writing artifacts under `cfg.out_dir`.
///
/// On failure the partial artifacts are moved under `out_dir/failed/` and the
/// error names the stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate().map_err(|e| stage_err("config", e))?;
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    clear_previous(out)?;
    let result = run_stages(cfg, out);
    if result.is_err() {
        quarantine(out);
    }
    result
}

fn run_stages(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutcome> {
    let shared = SharedInputs {
        cam_dist: if cfg.camera_dist_bundles.is_empty() {
            None
        } else {
            let mats = cfg
                .camera_dist_bundles
                .iter()
                .map(load_distance)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| stage_err("load", e))?;
            Some(mean_camera_distance(&mats).map_err(|e| stage_err("05_camera_distance", e))?)
        },
        val: cfg
            .val_bundle
            .as_ref()
            .map(load_bundle)
            .transpose()
            .map_err(|e| stage_err("load", e))?,
    };

    let mut run = Run {
        out,
        records: Vec::new(),
    };
    let mut finals = Vec::with_capacity(cfg.models.len());
    let mut first_view: Option<TestView> = None;
    for (m, input) in cfg.models.iter().enumerate() {
        let set = load_bundle(&input.bundle).map_err(|e| stage_err("load", e))?;
        let view = TestView::from_set(&set).map_err(|e| stage_err("load", e))?;
        if let Some(first) = &first_view {
            if first.set.meta() != view.set.meta() {
                return Err(stage_err(
                    "load",
                    Error::ShapeMismatch(format!(
                        "model {m} bundle has different query/gallery metadata than model 0"
                    )),
                ));
            }
        }
        let params = cfg.stages.with_overrides(&input.overrides);
        finals.push(run_model(&mut run, m, view.clone(), &params, &shared)?);
        first_view.get_or_insert(view);
    }
    let view = first_view.expect("at least one model");

    let (final_dist, final_report) = if finals.len() > 1 {
        let stage = "08_fusion";
        let spec = cfg
            .fusion
            .clone()
            .unwrap_or_else(|| FusionSpec::uniform(finals.len()));
        let fused = fuse_distances(&finals, &spec).map_err(|e| stage_err(stage, e))?;
        let report = run
            .emit(None, stage, &view, &fused)
            .map_err(|e| stage_err(stage, e))?;
        (fused, report)
    } else {
        let dist = finals.pop().expect("one model");
        let report = view
            .evaluate(&dist)
            .map_err(|e| stage_err("09_evaluate", e))?;
        (dist, report)
    };

    write_report(&out.join("report.json"), &final_report)
        .map_err(|e| stage_err("09_evaluate", e))?;
    let summary = RunSummary {
        seed: cfg.seed,
        stages: &run.records,
        final_map: final_report.map,
        final_rank1: final_report.rank(1),
    };
    let path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(|e| stage_err("09_evaluate", Error::io(&path, e)))?;

    Ok(PipelineOutcome {
        stages: run.records,
        final_dist,
        final_report,
    })
}

/// Which distance the clustering stage runs DBSCAN on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterDistance {
    Raw,
    #[default]
    Reranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub distance: ClusterDistance,
    pub rerank: RerankParams,
    pub dbscan: DbscanParams,
    /// Largest clusters kept as classes.
    pub top: usize,
    /// One-sample, negatives-only classes added afterwards.
    pub singletons: usize,
    pub singleton_pool: SingletonPool,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            distance: ClusterDistance::Reranked,
            rerank: RerankParams::default(),
            dbscan: DbscanParams::default(),
            top: 500,
            singletons: 200,
            singleton_pool: SingletonPool::Outliers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    /// Bundle whose target-domain train rows are clustered.
    pub bundle: PathBuf,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub params: ClusterParams,
    /// Epochs between re-clustering passes, for the external trainer.
    #[serde(default = "default_recluster_every")]
    pub recluster_every: usize,
    /// Output `labels.csv` path.
    pub out: PathBuf,
}

fn default_recluster_every() -> usize {
    6
}

impl ClusterConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub ids: Vec<u64>,
    pub clustering: Clustering,
    pub labeling: PseudoLabeling,
    /// Agreement with the bundle's identities when every row is labeled.
    pub ari: Option<f64>,
}

/// DBSCAN, top-class selection and singleton classes over a self matrix.
pub fn pseudo_labels(
    dist: &DistanceMatrix,
    params: &ClusterParams,
) -> Result<(Clustering, PseudoLabeling)> {
    let clustering = dbscan(dist, &params.dbscan)?;
    let base = select_top_classes(&clustering, params.top)?;
    let labeling = add_singletons(
        &base,
        &clustering,
        dist,
        params.singletons,
        params.singleton_pool,
    )?;
    Ok((clustering, labeling))
}

/// Writes `index,class,negatives_only`; unassigned samples get class `-1`.
pub fn write_pseudo_labels(
    path: impl AsRef<Path>,
    ids: &[u64],
    labeling: &PseudoLabeling,
) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != labeling.assignment.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids for {} labels",
            ids.len(),
            labeling.assignment.len()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["index", "class", "negatives_only"])
        .map_err(csv_err)?;
    for (id, class) in ids.iter().zip(&labeling.assignment) {
        let (class, flag) = match class {
            Some(c) => (*c as i64, labeling.negatives_only[*c]),
            None => (-1, false),
        };
        w.write_record([
            id.to_string(),
            class.to_string(),
            u8::from(flag).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Clusters the target-domain train rows of a bundle into pseudo labels.
pub fn run_cluster_stage(cfg: &ClusterConfig) -> Result<ClusterOutcome> {
    let set = load_bundle(&cfg.bundle)?;
    let rows: Vec<usize> = (0..set.len())
        .filter(|&i| {
            let m = &set.meta()[i];
            m.domain == Domain::Target && m.split == Split::Train
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::InsufficientSamples(
            "bundle has no target-domain train rows".into(),
        ));
    }
    let mut train = set.select_rows(&rows);
    if cfg.normalize {
        train = l2_normalize(&train).0;
    }
    let mut dist = pairwise_distance(&train, &train, cfg.metric)?;
    if cfg.params.distance == ClusterDistance::Reranked {
        dist = rerank_all(&dist, &cfg.params.rerank)?;
    }
    let (clustering, labeling) = pseudo_labels(&dist, &cfg.params)?;
    write_pseudo_labels(&cfg.out, &train.indices(), &labeling)?;

    let ari = if train.meta().iter().all(|m| m.pid >= 0) {
        let truth: Vec<i64> = train.meta().iter().map(|m| m.pid).collect();
        Some(adjusted_rand_index(&clustering.as_partition(), &truth)?)
    } else {
        None
    };
    Ok(ClusterOutcome {
        ids: train.indices(),
        clustering,
        labeling,
        ari,
    })
}
