//! Experiment pipelines behind the `sparse-eta` binary: synthetic data
//! generation, EM training, evaluation, inference and condition maps.
//!
//! Every command reads and writes a single output directory:
//!
//! ```text
//! <out>/manifest.json          seeds, counts and file inventory
//! <out>/network.json           road network
//! <out>/ground_truth.json      true per-segment means and deviations
//! <out>/dense.jsonl            dense ground-truth sidecar
//! <out>/sparse_<label>.jsonl   one sparse corpus per keep ratio
//! <out>/train/<label>/         state.json, model.json, nll_history.json, iterations.log
//! <out>/eval/                  report.json, report.csv, conditions/*.geojson
//! <out>/resolved/<cmd>.toml    resolved config of the last run of each command
//! ```

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sparse_eta::emtrain::{infer_trajectory, run_em, split_trajectories, StopReason, TrajectoryEstimate};
use sparse_eta::evalkit::{
    condition_map, conditions_geojson, mu_recovery, observed_segments, reports_csv, route_accuracy_with,
    route_report, tte_metrics, MuRecovery, RouteReport, TteReport,
};
use sparse_eta::netgraph::{load_network, write_network, RoadNetwork};
use sparse_eta::simkit::{
    gen_ground_truth, gen_grid_network, gen_trips, read_jsonl, sparsify, traversal_counts, write_jsonl,
    DenseTrajectory, GroundTruth, SidecarRecord, SparseTrajectory,
};
use sparse_eta::stmodel::{ModelCheckpoint, SpatioTemporalModel, TemporalContext, TravelTimeTable};

pub use config::{ratio_label, ExperimentConfig, Overrides, StageSeeds};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NETWORK_FILE: &str = "network.json";
pub const TRUTH_FILE: &str = "ground_truth.json";
pub const SIDECAR_FILE: &str = "dense.jsonl";

pub fn corpus_file(label: &str) -> String {
    format!("sparse_{label}.jsonl")
}

pub fn train_dir(out: &Path, label: &str) -> PathBuf {
    out.join("train").join(label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub seeds: StageSeeds,
    pub network: NetworkInfo,
    pub ground_truth: String,
    pub sidecar: CorpusInfo,
    pub corpora: Vec<CorpusInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkInfo {
    pub file: String,
    /// `grid` or the name of the source file.
    pub source: String,
    pub nodes: usize,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub file: String,
    pub label: Option<String>,
    pub keep_ratio: Option<f64>,
    pub trajectories: usize,
    /// Fixes for sparse corpora, traversed segments for the sidecar.
    pub points: usize,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        read_json(&out.join(MANIFEST_FILE)).context("no usable manifest; run `gen` first")
    }

    pub fn corpus(&self, label: &str) -> Result<&CorpusInfo> {
        self.corpora
            .iter()
            .find(|c| c.label.as_deref() == Some(label))
            .with_context(|| format!("manifest has no corpus labelled {label}"))
    }
}

/// Trained model plus what is needed to rebuild its table and candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub label: String,
    pub keep_ratio: f64,
    pub checkpoint: ModelCheckpoint,
    pub reference_context: TemporalContext,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub m: usize,
    pub tau: f64,
    /// Segments on at least one assigned training route.
    pub observed: Vec<bool>,
}

impl TrainedModel {
    pub fn load(out: &Path, label: &str) -> Result<Self> {
        read_json(&train_dir(out, label).join("model.json"))
            .with_context(|| format!("no trained model for {label}; run `train` first"))
    }

    pub fn table(&self, net: &RoadNetwork) -> Result<TravelTimeTable> {
        if self.observed.len() != net.num_segments() {
            bail!(
                "model {} covers {} segments, network has {}",
                self.label,
                self.observed.len(),
                net.num_segments()
            );
        }
        let model = SpatioTemporalModel::new(net, self.checkpoint.config.clone());
        Ok(model.materialize(&self.checkpoint.params, &self.reference_context))
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Runs `f` on a pool with the configured number of threads.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}

fn echo_config(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let text = cfg.to_toml();
    info!("resolved config for {command}:\n{text}");
    write_file(&cfg.out.join("resolved").join(format!("{command}.toml")), text)
}

fn load_net(out: &Path) -> Result<RoadNetwork> {
    load_network(out.join(NETWORK_FILE)).context("loading generated network")
}

fn read_corpus(out: &Path, manifest: &Manifest, label: &str) -> Result<Vec<SparseTrajectory>> {
    let info = manifest.corpus(label)?;
    Ok(read_jsonl(out.join(&info.file))?)
}

/// Network, ground truth, dense trips, one sparse corpus per keep ratio and
/// the manifest.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    with_threads(cfg.threads, || gen(cfg))?
}

fn gen(cfg: &ExperimentConfig) -> Result<Manifest> {
    let out = &cfg.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    echo_config(cfg, "gen")?;
    let seeds = cfg.stage_seeds();
    let (net, source) = match &cfg.network.path {
        Some(p) => (
            load_network(p).with_context(|| format!("loading {}", p.display()))?,
            p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned()),
        ),
        None => {
            let g = &cfg.network.grid;
            (gen_grid_network(g.rows, g.cols, g.spacing_m, &g.class_plan(), seeds.network)?, "grid".to_owned())
        }
    };
    write_network(&net, out.join(NETWORK_FILE))?;
    let truth = gen_ground_truth(&net, &cfg.simulation.congestion, seeds.truth);
    write_json(&out.join(TRUTH_FILE), &truth)?;

    let dense = gen_trips(&net, &truth, &cfg.simulation.trip_config(seeds.trips))?;
    let sidecar: Vec<SidecarRecord> = dense.iter().map(SidecarRecord::from_dense).collect();
    write_jsonl(out.join(SIDECAR_FILE), &sidecar)?;
    info!("generated {} trips on {} segments", dense.len(), net.num_segments());

    let mut corpora = Vec::new();
    for &ratio in &cfg.sampling.keep_ratios {
        let label = ratio_label(ratio);
        let sparse = dense
            .par_iter()
            .map(|d| sparsify(&net, d, ratio, cfg.simulation.placement))
            .collect::<Result<Vec<_>, _>>()?;
        let file = corpus_file(&label);
        write_jsonl(out.join(&file), &sparse)?;
        corpora.push(CorpusInfo {
            file,
            label: Some(label),
            keep_ratio: Some(ratio),
            trajectories: sparse.len(),
            points: sparse.iter().map(|s| s.fixes.len()).sum(),
        });
    }
    let manifest = Manifest {
        seed: cfg.seed(),
        seeds,
        network: NetworkInfo {
            file: NETWORK_FILE.into(),
            source,
            nodes: net.num_nodes(),
            segments: net.num_segments(),
        },
        ground_truth: TRUTH_FILE.into(),
        sidecar: CorpusInfo {
            file: SIDECAR_FILE.into(),
            label: None,
            keep_ratio: None,
            trajectories: dense.len(),
            points: dense.iter().map(|d| d.route.segment_ids.len()).sum(),
        },
        corpora,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub final_nll: Option<f64>,
    pub delta_mu_max: f64,
    pub reassigned_count: usize,
}

/// Runs EM on the training split of every configured corpus.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    with_threads(cfg.threads, || train(cfg))?
}

fn train(cfg: &ExperimentConfig) -> Result<Vec<TrainSummary>> {
    let out = &cfg.out;
    let manifest = Manifest::load(out)?;
    echo_config(cfg, "train")?;
    if manifest.seed != cfg.seed() {
        warn!("config seed {} differs from the generation seed {}", cfg.seed(), manifest.seed);
    }
    let net = load_net(out)?;
    let seeds = cfg.stage_seeds();
    let em = cfg.em_config();
    let mut summaries = Vec::new();
    for &ratio in &cfg.sampling.keep_ratios {
        let label = ratio_label(ratio);
        let corpus = read_corpus(out, &manifest, &label)?;
        let (train, val, test) = split_trajectories(&corpus, cfg.split.val_frac, cfg.split.test_frac, seeds.split);
        info!("{label}: {} train, {} validation, {} test trajectories", train.len(), val.len(), test.len());
        let (_, state) = run_em(&net, &train, &val, em.clone()).with_context(|| format!("training on {label}"))?;

        let dir = train_dir(out, &label);
        fs::create_dir_all(&dir)?;
        state.save(dir.join("state.json"))?;
        write_json(&dir.join("nll_history.json"), &state.nll_history)?;
        let mut log_lines = String::new();
        for l in &state.log {
            let line = format!(
                "iteration={} lr={} epochs={} nll_before={} nll_after={} val_nll={} delta_mu_max={} reassigned_count={}",
                l.iteration,
                l.lr,
                l.epochs_run,
                l.nll_before,
                l.nll_after,
                l.val_nll.map_or_else(|| "none".to_owned(), |v| v.to_string()),
                l.delta_mu_max,
                l.reassigned_count,
            );
            info!("{label}: {line}");
            log_lines.push_str(&line);
            log_lines.push('\n');
        }
        write_file(&dir.join("iterations.log"), log_lines)?;
        let model = TrainedModel {
            label: label.clone(),
            keep_ratio: ratio,
            checkpoint: ModelCheckpoint {
                config: state.config.model.clone(),
                seed: state.config.seed,
                params: state.params.clone(),
            },
            reference_context: state.reference_context,
            iterations: state.iteration,
            stop: state.stop,
            m: state.config.m,
            tau: state.config.tau,
            observed: observed_segments(&state.pairs, net.num_segments()),
        };
        write_json(&dir.join("model.json"), &model)?;
        summaries.push(TrainSummary {
            label,
            iterations: state.iteration,
            stop: state.stop,
            final_nll: state.nll_history.last().copied(),
            delta_mu_max: state.delta_mu_max,
            reassigned_count: state.reassigned_count,
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub label: String,
    pub keep_ratio: f64,
    pub test_trajectories: usize,
    /// Test trajectories with at least one gap that could not be estimated.
    pub incomplete: usize,
    pub tte: Option<TteReport>,
    pub route: Option<RouteReport>,
    pub mu_recovery: Option<MuRecovery>,
    pub condition_maps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Errors over every evaluated trajectory, broken down by sampling interval.
    pub tte: Option<TteReport>,
    pub ratios: Vec<RatioReport>,
}

/// Test-split travel-time and route-recovery reports for every trained corpus.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    with_threads(cfg.threads, || eval(cfg))?
}

fn load_sidecar(out: &Path, net: &RoadNetwork) -> Result<Option<BTreeMap<u64, DenseTrajectory>>> {
    let path = out.join(SIDECAR_FILE);
    if !path.exists() {
        warn!("{} is missing; route metrics are skipped", path.display());
        return Ok(None);
    }
    let records: Vec<SidecarRecord> = read_jsonl(&path)?;
    Ok(Some(records.into_iter().map(|r| (r.id, r.into_dense(net))).collect()))
}

fn eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let out = &cfg.out;
    let manifest = Manifest::load(out)?;
    echo_config(cfg, "eval")?;
    let net = load_net(out)?;
    let sidecar = load_sidecar(out, &net)?;
    let truth_path = out.join(TRUTH_FILE);
    let truth: Option<GroundTruth> = if truth_path.exists() { Some(read_json(&truth_path)?) } else { None };
    let seeds = cfg.stage_seeds();

    let mut ratios = Vec::new();
    let (mut all_pred, mut all_true) = (Vec::new(), Vec::new());
    let mut breakdown = BTreeMap::new();
    for &ratio in &cfg.sampling.keep_ratios {
        let label = ratio_label(ratio);
        let model = TrainedModel::load(out, &label)?;
        let table = model.table(&net)?;
        let corpus = read_corpus(out, &manifest, &label)?;
        let (train, _, test) = split_trajectories(&corpus, cfg.split.val_frac, cfg.split.test_frac, seeds.split);
        let estimates: Vec<TrajectoryEstimate> = test
            .par_iter()
            .map(|t| infer_trajectory(&table, &net, t, model.m, model.tau))
            .collect();
        let pred: Vec<f64> = estimates.iter().map(|e| e.total_seconds).collect();
        let truth_s: Vec<f64> = test.iter().map(|t| t.total_time()).collect();
        let tte = if test.is_empty() {
            warn!("{label}: empty test split; no travel-time report");
            None
        } else {
            Some(tte_metrics(&pred, &truth_s)?)
        };
        if let Some(t) = &tte {
            breakdown.insert(label.clone(), t.clone());
            all_pred.extend_from_slice(&pred);
            all_true.extend_from_slice(&truth_s);
        }
        let route = sidecar.as_ref().map(|sc| {
            let samples: Vec<(f64, f64)> = test
                .iter()
                .zip(&estimates)
                .filter_map(|(t, e)| {
                    let d = sc.get(&t.id)?;
                    let acc = route_accuracy_with(&net, &d.route.segment_ids, &e.route(), cfg.eval.undirected_overlap);
                    Some((t.departure(), acc))
                })
                .collect();
            route_report(&samples)
        });
        let mu_recovery = match (&truth, &sidecar) {
            (Some(truth), Some(sc)) => {
                let dense: Vec<DenseTrajectory> = train.iter().filter_map(|t| sc.get(&t.id).cloned()).collect();
                let counts = traversal_counts(&dense, net.num_segments());
                Some(mu_recovery(&table, &truth.true_mu, &counts, cfg.eval.min_count))
            }
            _ => None,
        };
        let condition_maps = write_condition_maps(
            &out.join("eval").join("conditions"),
            &net,
            &table,
            &model,
            &cfg.eval.condition_steps,
        )?
        .into_iter()
        .map(|p| p.strip_prefix(out).unwrap_or(&p).display().to_string())
        .collect();
        if let Some(t) = &tte {
            info!("{label}: MAPE {:.3}% RMSE {:.3} min MAE {:.3} min", t.mape_pct, t.rmse_min, t.mae_min);
        }
        if let Some(r) = &route {
            info!("{label}: mean route accuracy {:.4}", r.mean_accuracy);
        }
        ratios.push(RatioReport {
            label,
            keep_ratio: ratio,
            test_trajectories: test.len(),
            incomplete: estimates.iter().filter(|e| !e.complete).count(),
            tte,
            route,
            mu_recovery,
            condition_maps,
        });
    }
    let tte = if all_pred.is_empty() {
        None
    } else {
        let mut t = tte_metrics(&all_pred, &all_true)?;
        t.breakdown = breakdown;
        Some(t)
    };
    let report = EvalReport { tte, ratios };
    let dir = out.join("eval");
    write_json(&dir.join("report.json"), &report)?;
    let rows: Vec<(String, &TteReport, Option<&RouteReport>)> = report
        .ratios
        .iter()
        .filter_map(|r| r.tte.as_ref().map(|t| (r.label.clone(), t, r.route.as_ref())))
        .collect();
    write_file(&dir.join("report.csv"), reports_csv(&rows))?;
    Ok(report)
}

fn write_condition_maps(
    dir: &Path,
    net: &RoadNetwork,
    table: &TravelTimeTable,
    model: &TrainedModel,
    steps: &[usize],
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &ts in steps {
        let conds = condition_map(table, net, ts, Some(&model.observed));
        let path = dir.join(format!("{}_ts{ts:02}.geojson", model.label));
        write_json(&path, &conditions_geojson(net, ts, &conds))?;
        written.push(path);
    }
    Ok(written)
}

/// Condition maps of one trained model at the given time steps.
pub fn cmd_export_conditions(cfg: &ExperimentConfig, label: &str, steps: &[usize]) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if let Some(&bad) = steps.iter().find(|&&s| s >= sparse_eta::stmodel::TIME_STEPS) {
        bail!("time step {bad} is out of range");
    }
    echo_config(cfg, "export-conditions")?;
    let net = load_net(&cfg.out)?;
    let model = TrainedModel::load(&cfg.out, label)?;
    let table = model.table(&net)?;
    write_condition_maps(&cfg.out.join("conditions"), &net, &table, &model, steps)
}

/// Per-gap routes and times of one trajectory. Reads `input` (JSON lines of
/// sparse trajectories) or, by default, the model's own corpus, and picks
/// trajectory `id` or the first one.
pub fn cmd_infer(
    cfg: &ExperimentConfig,
    label: &str,
    input: Option<&Path>,
    id: Option<u64>,
) -> Result<(TrajectoryEstimate, PathBuf)> {
    cfg.validate()?;
    with_threads(cfg.threads, || infer(cfg, label, input, id))?
}

fn infer(
    cfg: &ExperimentConfig,
    label: &str,
    input: Option<&Path>,
    id: Option<u64>,
) -> Result<(TrajectoryEstimate, PathBuf)> {
    let out = &cfg.out;
    echo_config(cfg, "infer")?;
    let net = load_net(out)?;
    let model = TrainedModel::load(out, label)?;
    let table = model.table(&net)?;
    let trajs: Vec<SparseTrajectory> = match input {
        Some(p) => read_jsonl(p)?,
        None => read_corpus(out, &Manifest::load(out)?, label)?,
    };
    let traj = match id {
        Some(id) => trajs.iter().find(|t| t.id == id).with_context(|| format!("no trajectory with id {id}"))?,
        None => trajs.first().context("no trajectories to infer")?,
    };
    let est = infer_trajectory(&table, &net, traj, model.m, model.tau);
    let path = out.join("infer").join(format!("{label}_{}.json", traj.id));
    write_json(&path, &est)?;
    Ok((est, path))
}
