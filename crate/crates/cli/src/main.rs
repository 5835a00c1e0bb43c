//! `debias`: command-line front end for the post-processing toolkit.

mod selftest;

use std::collections::HashMap;
use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reid_debias::camera::{
    apply_topology, build_topology, mean_camera_distance, neighbor_smooth,
    subtract_camera_distance, subtract_camera_mean,
};
use reid_debias::metrics::{
    evaluate, fuse_distances, l2_normalize, pairwise_distance, EvalReport, FusionNorm, FusionSpec,
    Metric,
};
use reid_debias::pipeline::{
    pseudo_labels, run_cluster_stage, run_pipeline, write_pseudo_labels, ClusterConfig,
    ClusterOutcome, ClusterParams, PipelineConfig, TestView,
};
use reid_debias::pseudo::SingletonPool;
use reid_debias::rerank::{rerank, rerank_all, RerankParams};
use reid_debias::store::{
    generate_synthetic, load_bundle, load_distance, save_bundle, save_distance,
};
use reid_debias::trainmath::LrSchedule;
use reid_debias::{DistanceMatrix, SampleMeta, Split, SynthConfig};
use serde_json::json;

type CliResult<T = ()> = Result<T, Box<dyn StdError>>;

#[derive(Parser, Debug)]
#[command(
    name = "debias",
    version,
    about = "Embedding post-processing for cross-domain person re-identification"
)]
struct Cli {
    /// JSON configuration for the subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (results do not depend on it)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory (or file, for `cluster`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic identity/camera embedding bundle
    Synth {
        /// Overrides the generator seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate mAP / CMC of a bundle, or of a distance matrix against it
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        /// Query x gallery (or query ++ gallery self) distance matrix
        #[arg(long)]
        dist: Option<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Camera-bias fixes; writes the query ++ gallery self matrix
    Camfix {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        /// Subtract per-camera feature means
        #[arg(long)]
        camera_mean: bool,
        /// Neighbor smoothing size (0 disables)
        #[arg(long, default_value_t = 0)]
        neighbor_k: usize,
        /// Camera-model distance matrices over query ++ gallery
        #[arg(long, value_delimiter = ',')]
        cam_dist: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        cam_rate: f64,
        /// Labeled bundle to estimate camera topology from
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        alpha: f64,
    },
    /// k-reciprocal re-ranking of a query ++ gallery self matrix
    Rerank {
        #[arg(long)]
        dist: PathBuf,
        /// Leading rows that are queries
        #[arg(long)]
        n_query: Option<usize>,
        #[arg(long, default_value_t = 20)]
        k1: usize,
        #[arg(long, default_value_t = 6)]
        k2: usize,
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        /// Write the full re-ranked self matrix instead of the query block
        #[arg(long)]
        all: bool,
    },
    /// DBSCAN pseudo labels with top-class selection and singleton classes
    Cluster {
        /// Self distance matrix to cluster
        #[arg(long, conflicts_with = "bundle")]
        dist: Option<PathBuf>,
        /// Bundle whose target-domain train rows are clustered
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        min_samples: Option<usize>,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        singletons: Option<usize>,
        /// Also draw singletons from clusters dropped by `--top`
        #[arg(long)]
        include_discarded: bool,
    },
    /// Weighted fusion of distance matrices
    Fuse {
        #[arg(long, value_delimiter = ',', required = true)]
        dist: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
        #[arg(long, default_value = "none")]
        normalize: FusionNorm,
    },
    /// Full staged pipeline from `--config`
    Run,
    /// Loss function checks
    Losses {
        #[command(subcommand)]
        action: LossAction,
    },
    /// Learning rate per epoch
    Schedule {
        /// 1-based epoch; prints every epoch when omitted
        #[arg(long)]
        epoch: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum LossAction {
    /// Check the losses against closed-form values
    Selftest,
}

#[derive(Args, Debug)]
struct FeatureArgs {
    /// L2-normalize features first
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value = "euclidean")]
    metric: Metric,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<ExitCode> {
    match &cli.command {
        Command::Synth { seed } => synth(cli, *seed)?,
        Command::Eval {
            bundle,
            dist,
            features,
        } => eval(cli, bundle, dist.as_deref(), features)?,
        Command::Camfix {
            bundle,
            features,
            camera_mean,
            neighbor_k,
            cam_dist,
            cam_rate,
            topology,
            alpha,
        } => {
            let fixes = CameraFixes {
                camera_mean: *camera_mean,
                neighbor_k: *neighbor_k,
                cam_dist,
                cam_rate: *cam_rate,
                topology: topology.as_deref(),
                alpha: *alpha,
            };
            camfix(cli, bundle, features, &fixes)?
        }
        Command::Rerank {
            dist,
            n_query,
            k1,
            k2,
            lambda,
            all,
        } => {
            let params = RerankParams {
                k1: *k1,
                k2: *k2,
                lambda: *lambda,
            };
            rerank_cmd(cli, dist, *n_query, &params, *all)?
        }
        Command::Cluster {
            dist,
            bundle,
            eps,
            min_samples,
            top,
            singletons,
            include_discarded,
        } => {
            let flags = ClusterFlags {
                eps: *eps,
                min_samples: *min_samples,
                top: *top,
                singletons: *singletons,
                include_discarded: *include_discarded,
            };
            cluster(cli, dist.as_deref(), bundle.as_deref(), &flags)?
        }
        Command::Fuse {
            dist,
            weights,
            normalize,
        } => fuse(cli, dist, weights, *normalize)?,
        Command::Run => run(cli)?,
        Command::Losses {
            action: LossAction::Selftest,
        } => {
            return Ok(if selftest::run() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Schedule { epoch } => schedule(cli, *epoch)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn required_out(cli: &Cli) -> CliResult<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| "this subcommand needs --out".into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn report_line(report: &EvalReport) -> serde_json::Value {
    json!({
        "map": report.map,
        "rank1": report.rank(1),
        "rank5": report.rank(5),
        "rank10": report.rank(10),
        "queries": report.included_queries(),
        "excluded_queries": report.excluded_queries,
    })
}

fn synth(cli: &Cli, seed: Option<u64>) -> CliResult {
    let mut cfg: SynthConfig = match &cli.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let out = required_out(cli)?;
    let set = generate_synthetic(&cfg)?;
    save_bundle(&set, out)?;
    println!(
        "{}",
        json!({"rows": set.len(), "dim": set.dim(), "seed": cfg.seed, "out": out})
    );
    Ok(())
}

fn prepare_view(bundle: &Path, features: &FeatureArgs) -> CliResult<TestView> {
    let set = load_bundle(bundle)?;
    let mut view = TestView::from_set(&set)?;
    if features.normalize {
        view.set = l2_normalize(&view.set).0;
    }
    Ok(view)
}

/// Query x gallery block of `dist`, with rows and columns resolved against
/// the bundle's metadata by sample index.
fn query_gallery(
    dist: &DistanceMatrix,
    bundle: &Path,
) -> CliResult<(DistanceMatrix, Vec<SampleMeta>, Vec<SampleMeta>)> {
    let set = load_bundle(bundle)?;
    let by_index: HashMap<u64, SampleMeta> = set.meta().iter().map(|m| (m.index, *m)).collect();
    let lookup = |ids: &[u64]| -> CliResult<Vec<SampleMeta>> {
        ids.iter()
            .map(|id| {
                by_index
                    .get(id)
                    .copied()
                    .ok_or_else(|| format!("sample {id} is not in {}", bundle.display()).into())
            })
            .collect()
    };
    let rows = lookup(dist.row_ids())?;
    let cols = lookup(dist.col_ids())?;
    if !dist.is_self() || dist.row_ids() != dist.col_ids() {
        return Ok((dist.clone(), rows, cols));
    }
    let q: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].split == Split::Query)
        .collect();
    let g: Vec<usize> = (0..cols.len())
        .filter(|&j| cols[j].split == Split::Gallery)
        .collect();
    let values = q
        .iter()
        .flat_map(|&i| g.iter().map(move |&j| dist.get(i, j)))
        .collect();
    let block = DistanceMatrix::new(
        q.len(),
        g.len(),
        values,
        q.iter().map(|&i| rows[i].index).collect(),
        g.iter().map(|&j| cols[j].index).collect(),
    )?;
    Ok((
        block,
        q.iter().map(|&i| rows[i]).collect(),
        g.iter().map(|&j| cols[j]).collect(),
    ))
}

fn eval(cli: &Cli, bundle: &Path, dist: Option<&Path>, features: &FeatureArgs) -> CliResult {
    let report = match dist {
        Some(path) => {
            let (qg, q, g) = query_gallery(&load_distance(path)?, bundle)?;
            evaluate(&qg, &q, &g)?
        }
        None => {
            let view = prepare_view(bundle, features)?;
            let qg = pairwise_distance(&view.query(), &view.gallery(), features.metric)?;
            view.evaluate(&qg)?
        }
    };
    if let Some(out) = &cli.out {
        write_json(&out.join("report.json"), &report)?;
    }
    println!("{}", report_line(&report));
    Ok(())
}

struct CameraFixes<'a> {
    camera_mean: bool,
    neighbor_k: usize,
    cam_dist: &'a [PathBuf],
    cam_rate: f64,
    topology: Option<&'a Path>,
    alpha: f64,
}

fn camfix(cli: &Cli, bundle: &Path, features: &FeatureArgs, fixes: &CameraFixes<'_>) -> CliResult {
    let out = required_out(cli)?;
    let mut view = prepare_view(bundle, features)?;
    if fixes.camera_mean {
        view.set = subtract_camera_mean(&view.set);
    }
    if fixes.neighbor_k > 0 {
        view.set = neighbor_smooth(&view.set, fixes.neighbor_k)?;
    }
    if features.normalize || fixes.camera_mean || fixes.neighbor_k > 0 {
        save_bundle(&view.set, out.join("features"))?;
    }
    let mut full = pairwise_distance(&view.set, &view.set, features.metric)?;
    if fixes.cam_rate > 0.0 {
        if fixes.cam_dist.is_empty() {
            return Err("--cam-rate needs --cam-dist".into());
        }
        let mats = fixes
            .cam_dist
            .iter()
            .map(load_distance)
            .collect::<Result<Vec<_>, _>>()?;
        full = subtract_camera_distance(&full, &mean_camera_distance(&mats)?, fixes.cam_rate)?;
    }
    if fixes.alpha != 0.0 {
        let val_path = fixes.topology.ok_or("--alpha needs --topology")?;
        let val = load_bundle(val_path)?;
        let labeled: Vec<SampleMeta> = val.meta().iter().filter(|m| m.pid >= 0).copied().collect();
        let cams = view.set.camids();
        let n_cams = cams.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
        let topo = build_topology(&labeled, Some(n_cams))?;
        full = apply_topology(&full, &topo, &cams, &cams, fixes.alpha)?;
    }
    save_distance(&full, out)?;
    let report = view.evaluate(&view.block(&full)?)?;
    write_json(&out.join("report.json"), &report)?;
    println!("{}", report_line(&report));
    Ok(())
}

fn rerank_cmd(
    cli: &Cli,
    dist: &Path,
    n_query: Option<usize>,
    params: &RerankParams,
    all: bool,
) -> CliResult {
    let out = required_out(cli)?;
    let full = load_distance(dist)?;
    let result = if all {
        rerank_all(&full, params)?
    } else {
        let n_query = n_query.ok_or("--n-query is required unless --all is given")?;
        rerank(&full, n_query, params)?
    };
    save_distance(&result, out)?;
    println!(
        "{}",
        json!({"rows": result.rows(), "cols": result.cols(), "out": out})
    );
    Ok(())
}

struct ClusterFlags {
    eps: Option<f64>,
    min_samples: Option<usize>,
    top: Option<usize>,
    singletons: Option<usize>,
    include_discarded: bool,
}

impl ClusterFlags {
    fn apply(&self, params: &mut ClusterParams) {
        if let Some(eps) = self.eps {
            params.dbscan.eps = eps;
        }
        if let Some(m) = self.min_samples {
            params.dbscan.min_samples = m;
        }
        if let Some(top) = self.top {
            params.top = top;
        }
        if let Some(s) = self.singletons {
            params.singletons = s;
        }
        if self.include_discarded {
            params.singleton_pool = SingletonPool::OutliersAndDiscarded;
        }
    }
}

fn cluster_summary(outcome: &ClusterOutcome, out: &Path) -> serde_json::Value {
    json!({
        "samples": outcome.ids.len(),
        "clusters": outcome.clustering.n_clusters,
        "outliers": outcome.clustering.outliers().len(),
        "classes": outcome.labeling.n_classes,
        "negatives_only": outcome.labeling.negatives_only.iter().filter(|f| **f).count(),
        "ari": outcome.ari,
        "out": out,
    })
}

fn cluster(
    cli: &Cli,
    dist: Option<&Path>,
    bundle: Option<&Path>,
    flags: &ClusterFlags,
) -> CliResult {
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("labels.csv"));
    if let Some(path) = dist {
        let mut params: ClusterParams = match &cli.config {
            Some(cfg) => read_json(cfg)?,
            None => ClusterParams::default(),
        };
        flags.apply(&mut params);
        let dist = load_distance(path)?;
        let (clustering, labeling) = pseudo_labels(&dist, &params)?;
        write_pseudo_labels(&out, dist.row_ids(), &labeling)?;
        let outcome = ClusterOutcome {
            ids: dist.row_ids().to_vec(),
            clustering,
            labeling,
            ari: None,
        };
        println!("{}", cluster_summary(&outcome, &out));
        return Ok(());
    }
    let mut cfg = match (&cli.config, bundle) {
        (Some(path), _) => {
            let mut cfg = ClusterConfig::load(path)?;
            if let Some(b) = bundle {
                cfg.bundle = b.to_path_buf();
            }
            if cli.out.is_some() {
                cfg.out = out.clone();
            }
            cfg
        }
        (None, Some(b)) => ClusterConfig {
            bundle: b.to_path_buf(),
            normalize: false,
            metric: Metric::Euclidean,
            params: ClusterParams::default(),
            recluster_every: 6,
            out: out.clone(),
        },
        (None, None) => return Err("cluster needs --dist, --bundle or --config".into()),
    };
    flags.apply(&mut cfg.params);
    let outcome = run_cluster_stage(&cfg)?;
    println!("{}", cluster_summary(&outcome, &cfg.out));
    Ok(())
}

fn fuse(cli: &Cli, dist: &[PathBuf], weights: &[f64], normalize: FusionNorm) -> CliResult {
    let out = required_out(cli)?;
    let mats = dist
        .iter()
        .map(load_distance)
        .collect::<Result<Vec<_>, _>>()?;
    let spec = FusionSpec {
        weights: if weights.is_empty() {
            vec![1.0; mats.len()]
        } else {
            weights.to_vec()
        },
        normalize,
    };
    let fused = fuse_distances(&mats, &spec)?;
    save_distance(&fused, out)?;
    println!(
        "{}",
        json!({"rows": fused.rows(), "cols": fused.cols(), "out": out})
    );
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    let path = cli.config.as_deref().ok_or("run needs --config")?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let outcome = run_pipeline(&cfg)?;
    println!(
        "{:<8} {:<20} {:>8} {:>8} {:>8}",
        "model", "stage", "mAP", "rank1", "rank5"
    );
    for s in &outcome.stages {
        let model = s
            .model
            .map_or_else(|| "fused".to_string(), |m| m.to_string());
        println!(
            "{model:<8} {:<20} {:>8.4} {:>8.4} {:>8.4}",
            s.stage, s.map, s.rank1, s.rank5
        );
    }
    println!(
        "final mAP {:.4} rank1 {:.4}",
        outcome.final_report.map,
        outcome.final_report.rank(1)
    );
    Ok(())
}

fn schedule(cli: &Cli, epoch: Option<usize>) -> CliResult {
    let sched: LrSchedule = match &cli.config {
        Some(path) => read_json(path)?,
        None => LrSchedule::default(),
    };
    match epoch {
        Some(e) => println!("{}", sched.lr_at(e)?),
        None => {
            for e in 1..=sched.total_epochs {
                println!("{e}\t{}", sched.lr_at(e)?);
            }
        }
    }
    Ok(())
}
