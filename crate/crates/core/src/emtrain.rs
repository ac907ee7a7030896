//! Alternating estimation of travel-time distributions and routes.
//!
//! Each consecutive pair of fixes in a sparse trajectory becomes a weak
//! label: an observed duration over an unknown route drawn from a small
//! candidate set. The E step fits the model to those durations under the
//! current route assignment; the M step reassigns every pair to the
//! candidate whose expected time is closest to what was observed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::{NodeId, RoadNetwork, SegmentId};
use crate::pathing::{candidate_set, CandidateSet, PathError, Route, DEFAULT_CANDIDATES, DEFAULT_DIVERSITY_THRESHOLD};
use crate::simkit::{mix_seed, SparseTrajectory};
use crate::stmodel::{
    adam_step, aggregate_route, pair_nll, time_step_of, AdamState, ModelConfig, ModelError, ModelParams,
    SpatioTemporalModel, TemporalContext, TrainItem, TravelTimeTable,
};

#[derive(Debug, Error)]
pub enum EmError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(
        "non-finite loss at iteration {iteration}, epoch {epoch}: pair {pair_id} \
         (observed {observed} s, aggregate mu {mu}, sigma {sigma}, params {params:016x})"
    )]
    NonFinite {
        iteration: usize,
        epoch: usize,
        pair_id: usize,
        observed: f64,
        mu: f64,
        sigma: f64,
        params: u64,
    },
    #[error("state i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed training state: {0}")]
    Format(#[from] serde_json::Error),
    #[error("training state does not match the network: {0}")]
    Mismatch(String),
}

/// Route given to every pair before the first E step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialAssignment {
    /// The fastest candidate under free-flow times.
    #[default]
    Shortest,
    /// The regular assignment rule evaluated on the initial table.
    Discrepancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Candidate routes per pair.
    pub m: usize,
    /// Diversity threshold on weighted Jaccard overlap.
    pub tau: f64,
    pub max_em_iters: usize,
    /// Adam passes over the training pairs per E step.
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate after every EM iteration;
    /// `lr` is the initial rate.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Stop once no table mean moves by this many seconds.
    pub delta_mu_tol: f64,
    /// Epochs without validation improvement before an E step stops early;
    /// 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
    pub refresh_candidates_every_iter: bool,
    /// Assign by aggregate likelihood instead of absolute time discrepancy.
    pub use_nll_assignment: bool,
    pub initial_assignment: InitialAssignment,
    pub model: ModelConfig,
    /// Day, weather and holiday used to materialize the table; defaults to
    /// the most common context of the training pairs.
    pub reference_context: Option<TemporalContext>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            m: DEFAULT_CANDIDATES,
            tau: DEFAULT_DIVERSITY_THRESHOLD,
            max_em_iters: 10,
            epochs: 20,
            lr: 1e-4,
            lr_decay: 0.8,
            batch_size: 128,
            delta_mu_tol: 1.0,
            patience: 3,
            seed: 0,
            refresh_candidates_every_iter: false,
            use_nll_assignment: false,
            initial_assignment: InitialAssignment::default(),
            model: ModelConfig::default(),
            reference_context: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        let bad = |m: String| Err(EmError::Config(m));
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr must be positive and lr_decay in (0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.delta_mu_tol >= 0.0) {
            return bad("delta_mu_tol must be nonnegative".into());
        }
        if self.model.hidden == 0 || self.model.sigma_min <= 0.0 || self.model.sigma_init <= self.model.sigma_min {
            return bad("model needs hidden > 0 and sigma_init > sigma_min > 0".into());
        }
        Ok(())
    }
}

/// One observed gap between consecutive fixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub pair_id: usize,
    pub trajectory_id: u64,
    /// Index of the first fix of the pair within its trajectory.
    pub position: usize,
    pub origin: NodeId,
    pub dest: NodeId,
    pub observed: f64,
    pub depart_ts: f64,
    pub context: TemporalContext,
    pub candidates: CandidateSet,
}

impl PairSample {
    pub fn time_step(&self) -> usize {
        self.context.time_step
    }

    pub fn assigned(&self) -> &Route {
        self.candidates.assigned()
    }

    fn item(&self) -> TrainItem<'_> {
        TrainItem {
            segments: &self.assigned().segment_ids,
            context: self.context,
            observed: self.observed,
        }
    }
}

/// Pairs discarded while building weak labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropStats {
    pub kept: usize,
    pub snap_failed: usize,
    /// Both fixes on the same node, or a non-positive gap.
    pub degenerate: usize,
    pub no_path: usize,
}

impl DropStats {
    pub fn dropped(&self) -> usize {
        self.snap_failed + self.degenerate + self.no_path
    }
}

struct RawPair {
    trajectory_id: u64,
    position: usize,
    origin: NodeId,
    dest: NodeId,
    observed: f64,
    depart_ts: f64,
    context: TemporalContext,
}

/// Splits every trajectory into consecutive fix pairs with frozen candidate
/// sets computed under free-flow times.
pub fn build_pairs(
    net: &RoadNetwork,
    trajectories: &[SparseTrajectory],
    m: usize,
    tau: f64,
) -> Result<(Vec<PairSample>, DropStats), PathError> {
    let mut stats = DropStats::default();
    let mut raw = Vec::new();
    for traj in trajectories {
        let snapped: Vec<Option<NodeId>> = traj
            .fixes
            .iter()
            .map(|f| net.snap_point(f.lon, f.lat).ok())
            .collect();
        for (k, w) in traj.fixes.windows(2).enumerate() {
            let (Some(origin), Some(dest)) = (snapped[k], snapped[k + 1]) else {
                stats.snap_failed += 1;
                continue;
            };
            let observed = w[1].ts - w[0].ts;
            if origin == dest || !(observed > 0.0) {
                stats.degenerate += 1;
                continue;
            }
            raw.push(RawPair {
                trajectory_id: traj.id,
                position: k,
                origin,
                dest,
                observed,
                depart_ts: w[0].ts,
                context: TemporalContext::at(w[0].ts, traj.weather_id, traj.holiday_id),
            });
        }
    }

    let weights = net.base_times();
    let ods: Vec<(NodeId, NodeId)> = raw
        .iter()
        .map(|p| (p.origin, p.dest))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let sets: Vec<Result<CandidateSet, PathError>> = ods
        .par_iter()
        .map(|&(o, d)| candidate_set(net, &weights, o, d, m, tau))
        .collect();
    let mut cache = HashMap::with_capacity(ods.len());
    for (od, set) in ods.into_iter().zip(sets) {
        match set {
            Ok(c) => {
                cache.insert(od, Some(c));
            }
            Err(PathError::NoPath { .. }) => {
                cache.insert(od, None);
            }
            Err(e) => return Err(e),
        }
    }

    let mut pairs = Vec::with_capacity(raw.len());
    for p in raw {
        match &cache[&(p.origin, p.dest)] {
            Some(c) if !c.routes.is_empty() => pairs.push(PairSample {
                pair_id: pairs.len(),
                trajectory_id: p.trajectory_id,
                position: p.position,
                origin: p.origin,
                dest: p.dest,
                observed: p.observed,
                depart_ts: p.depart_ts,
                context: p.context,
                candidates: c.clone(),
            }),
            _ => stats.no_path += 1,
        }
    }
    stats.kept = pairs.len();
    if stats.dropped() > 0 {
        warn!(
            "dropped {} of {} pairs ({} unsnapped, {} degenerate, {} without path)",
            stats.dropped(),
            stats.dropped() + stats.kept,
            stats.snap_failed,
            stats.degenerate,
            stats.no_path
        );
    }
    Ok((pairs, stats))
}

/// Deterministic train / validation / test split keyed by trajectory id,
/// so corpora sparsified from the same trips split identically.
pub fn split_trajectories(
    trajectories: &[SparseTrajectory],
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> (Vec<SparseTrajectory>, Vec<SparseTrajectory>, Vec<SparseTrajectory>) {
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for t in trajectories {
        let u = (mix_seed(seed, t.id) >> 11) as f64 / (1u64 << 53) as f64;
        if u < test_fraction {
            test.push(t.clone());
        } else if u < test_fraction + val_fraction {
            val.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    (train, val, test)
}

/// Ordering used to pick a route: score, then shorter length, then
/// lexicographically smaller segment ids.
fn better(a: (f64, &Route), b: (f64, &Route)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.total_length_m.total_cmp(&b.1.total_length_m))
        .then_with(|| a.1.segment_ids.cmp(&b.1.segment_ids))
}

/// Index of the candidate whose summed mean is closest to `observed`
/// (or, with `use_nll`, whose aggregate likelihood is highest).
pub fn select_route(
    candidates: &CandidateSet,
    observed: f64,
    table: &TravelTimeTable,
    time_step: usize,
    use_nll: bool,
) -> usize {
    let score = |r: &Route| {
        let (mu, sigma) = aggregate_route(r, table, time_step);
        if use_nll {
            pair_nll(mu, sigma, observed)
        } else {
            (observed - mu).abs()
        }
    };
    let routes = &candidates.routes;
    (0..routes.len())
        .map(|i| (i, score(&routes[i])))
        .min_by(|a, b| better((a.1, &routes[a.0]), (b.1, &routes[b.0])))
        .map_or(0, |(i, _)| i)
}

/// Reassigns every pair; returns how many now follow a different route.
pub fn assign_routes(pairs: &mut [PairSample], table: &TravelTimeTable, use_nll: bool) -> usize {
    pairs
        .par_iter_mut()
        .map(|p| {
            let next = select_route(&p.candidates, p.observed, table, p.time_step(), use_nll);
            let changed = p.candidates.routes[next].segment_ids != p.assigned().segment_ids;
            p.candidates.assigned_index = next;
            changed as usize
        })
        .sum()
}

/// Rebuilds candidate sets with the table's means at each pair's time
/// step, keeping the assignment when the assigned route survives.
pub fn refresh_candidates(
    net: &RoadNetwork,
    pairs: &mut [PairSample],
    table: &TravelTimeTable,
    m: usize,
    tau: f64,
) -> Result<(), PathError> {
    let keys: Vec<(NodeId, NodeId, usize)> = pairs
        .iter()
        .map(|p| (p.origin, p.dest, p.time_step()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let sets: Vec<CandidateSet> = keys
        .par_iter()
        .map(|&(o, d, ts)| candidate_set(net, &table.mu_column(ts), o, d, m, tau))
        .collect::<Result<_, _>>()?;
    let cache: HashMap<_, _> = keys.into_iter().zip(sets).collect();
    for p in pairs {
        let mut fresh = cache[&(p.origin, p.dest, p.time_step())].clone();
        let current = &p.assigned().segment_ids;
        fresh.assigned_index = fresh
            .routes
            .iter()
            .position(|r| &r.segment_ids == current)
            .unwrap_or(0);
        p.candidates = fresh;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MuConverged,
    NoReassignment,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub epochs_run: usize,
    pub nll_before: f64,
    pub nll_after: f64,
    pub val_nll: Option<f64>,
    pub delta_mu_max: f64,
    pub reassigned_count: usize,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmState {
    pub iteration: usize,
    pub config: EmConfig,
    pub reference_context: TemporalContext,
    pub num_segments: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub table: TravelTimeTable,
    pub pairs: Vec<PairSample>,
    pub val_pairs: Vec<PairSample>,
    pub drops: DropStats,
    pub delta_mu_max: f64,
    pub reassigned_count: usize,
    pub nll_history: Vec<f64>,
    pub log: Vec<IterationLog>,
    /// Assigned candidate index of every training pair; entry 0 is the
    /// initial assignment.
    pub assignment_history: Vec<Vec<usize>>,
    pub stop: Option<StopReason>,
}

fn most_common_context(pairs: &[PairSample]) -> TemporalContext {
    let mut counts: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    for p in pairs {
        *counts
            .entry((p.context.day_of_week, p.context.weather_id, p.context.holiday_id))
            .or_default() += 1;
    }
    let best = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(k, _)| *k)
        .unwrap_or_default();
    TemporalContext {
        time_step: 0,
        day_of_week: best.0,
        weather_id: best.1,
        holiday_id: best.2,
    }
}

fn current_assignment(pairs: &[PairSample]) -> Vec<usize> {
    pairs.iter().map(|p| p.candidates.assigned_index).collect()
}

impl EmState {
    /// Builds the pairs, initializes the model (which reproduces free-flow
    /// means) and gives every pair its initial route.
    pub fn init(
        net: &RoadNetwork,
        model: &SpatioTemporalModel,
        train: &[SparseTrajectory],
        val: &[SparseTrajectory],
        config: EmConfig,
    ) -> Result<Self, EmError> {
        config.validate()?;
        let (mut pairs, drops) = build_pairs(net, train, config.m, config.tau).map_err(config_err)?;
        let (mut val_pairs, _) = build_pairs(net, val, config.m, config.tau).map_err(config_err)?;
        for p in pairs.iter().chain(&val_pairs) {
            model.check_context(&p.context)?;
        }
        let reference_context = config.reference_context.unwrap_or_else(|| most_common_context(&pairs));
        model.check_context(&reference_context)?;
        let params = model.init_params(config.seed);
        let table = model.materialize(&params, &reference_context);
        if config.initial_assignment == InitialAssignment::Discrepancy {
            assign_routes(&mut pairs, &table, config.use_nll_assignment);
            assign_routes(&mut val_pairs, &table, config.use_nll_assignment);
        }
        info!(
            "{} training pairs, {} validation pairs, {} parameters",
            pairs.len(),
            val_pairs.len(),
            params.num_scalars()
        );
        Ok(EmState {
            iteration: 0,
            reference_context,
            num_segments: net.num_segments(),
            adam: AdamState::new(&params),
            params,
            table,
            assignment_history: vec![current_assignment(&pairs)],
            pairs,
            val_pairs,
            drops,
            delta_mu_max: 0.0,
            reassigned_count: 0,
            nll_history: Vec::new(),
            log: Vec::new(),
            stop: None,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|source| EmError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Mean aggregate NLL of the training pairs under their assignments.
    pub fn train_nll(&self, model: &SpatioTemporalModel) -> f64 {
        mean_nll(model, &self.params, &self.pairs)
    }
}

fn config_err(e: PathError) -> EmError {
    EmError::Config(e.to_string())
}

fn mean_nll(model: &SpatioTemporalModel, params: &ModelParams, pairs: &[PairSample]) -> f64 {
    let items: Vec<TrainItem<'_>> = pairs.iter().map(PairSample::item).collect();
    model.loss(params, &items)
}

/// Validation loss: each validation pair takes its best-matching
/// candidate under the current table.
fn validation_nll(
    model: &SpatioTemporalModel,
    params: &ModelParams,
    val: &mut [PairSample],
    reference: &TemporalContext,
    use_nll: bool,
) -> f64 {
    let table = model.materialize(params, reference);
    assign_routes(val, &table, use_nll);
    mean_nll(model, params, val)
}

fn non_finite(model: &SpatioTemporalModel, state: &EmState, batch: &[usize], epoch: usize) -> EmError {
    let params = &state.params;
    let offender = batch
        .iter()
        .map(|&i| &state.pairs[i])
        .find(|p| !model.loss(params, &[p.item()]).is_finite())
        .unwrap_or(&state.pairs[batch[0]]);
    let rows: Vec<(usize, usize)> = offender.assigned().segment_ids.iter().map(|s| (s.index(), 0)).collect();
    let (mu, sigma) = model.predict_rows(params, &rows, &[offender.context]);
    EmError::NonFinite {
        iteration: state.iteration,
        epoch,
        pair_id: offender.pair_id,
        observed: offender.observed,
        mu: mu.iter().sum(),
        sigma: sigma.iter().map(|s| s * s).sum::<f64>().sqrt(),
        params: params.fingerprint(),
    }
}

/// Summary of one E step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EStepSummary {
    pub epochs_run: usize,
    pub nll_before: f64,
    pub nll_after: f64,
    pub val_nll: Option<f64>,
}

/// Runs up to `epochs` Adam passes over seeded shuffles of the training
/// pairs, then re-materializes the table and appends the mean NLL to the
/// history. With validation pairs and nonzero patience the best epoch by
/// validation loss is kept.
pub fn e_step(
    model: &SpatioTemporalModel,
    state: &mut EmState,
    epochs: usize,
    lr: f64,
) -> Result<EStepSummary, EmError> {
    let cfg = state.config.clone();
    let nll_before = state.train_nll(model);
    let early = cfg.patience > 0 && !state.val_pairs.is_empty();
    let mut best = early.then(|| {
        let v = validation_nll(
            model,
            &state.params,
            &mut state.val_pairs,
            &state.reference_context,
            cfg.use_nll_assignment,
        );
        (v, state.params.clone(), state.adam.clone())
    });
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..state.pairs.len()).collect();
    for epoch in 0..epochs {
        if state.pairs.is_empty() {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, state.iteration as u64), epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<TrainItem<'_>> = batch.iter().map(|&i| state.pairs[i].item()).collect();
            let (loss, grads) = model.loss_and_grad(&state.params, &items);
            if !loss.is_finite() {
                return Err(non_finite(model, state, batch, epoch));
            }
            adam_step(&mut state.params, &grads, &mut state.adam, lr);
        }
        epochs_run += 1;
        if let Some((best_val, best_params, best_adam)) = best.as_mut() {
            let v = validation_nll(
                model,
                &state.params,
                &mut state.val_pairs,
                &state.reference_context,
                cfg.use_nll_assignment,
            );
            if v < *best_val {
                *best_val = v;
                *best_params = state.params.clone();
                *best_adam = state.adam.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let val_nll = best.map(|(v, p, a)| {
        state.params = p;
        state.adam = a;
        v
    });
    state.table = model.materialize(&state.params, &state.reference_context);
    if val_nll.is_some() {
        assign_routes(&mut state.val_pairs, &state.table, cfg.use_nll_assignment);
    }
    let nll_after = state.train_nll(model);
    if !nll_after.is_finite() {
        let all: Vec<usize> = (0..state.pairs.len()).collect();
        return Err(non_finite(model, state, &all, epochs_run));
    }
    state.nll_history.push(nll_after);
    Ok(EStepSummary {
        epochs_run,
        nll_before,
        nll_after,
        val_nll,
    })
}

/// Reassigns every training pair under the current table and records the
/// number of changed routes.
pub fn m_step(state: &mut EmState) -> usize {
    let n = assign_routes(&mut state.pairs, &state.table, state.config.use_nll_assignment);
    state.reassigned_count = n;
    state.assignment_history.push(current_assignment(&state.pairs));
    n
}

/// Runs EM iterations until the means settle, no pair changes route, or
/// `max_em_iters` is reached. Continuing a state that stopped only on the
/// iteration limit proceeds if the limit has since been raised.
pub fn continue_em(net: &RoadNetwork, model: &SpatioTemporalModel, state: &mut EmState) -> Result<(), EmError> {
    if state.num_segments != net.num_segments() || state.table.num_segments() != net.num_segments() {
        return Err(EmError::Mismatch(format!(
            "state covers {} segments, network has {}",
            state.num_segments,
            net.num_segments()
        )));
    }
    match state.stop {
        Some(StopReason::MaxIterations) | None => state.stop = None,
        Some(_) => return Ok(()),
    }
    let cfg = state.config.clone();
    while state.stop.is_none() {
        if state.iteration >= cfg.max_em_iters {
            state.stop = Some(StopReason::MaxIterations);
            break;
        }
        let lr = cfg.lr * cfg.lr_decay.powi(state.iteration as i32);
        state.iteration += 1;
        let previous = state.table.clone();
        let summary = e_step(model, state, cfg.epochs, lr)?;
        if cfg.refresh_candidates_every_iter {
            refresh_candidates(net, &mut state.pairs, &state.table, cfg.m, cfg.tau).map_err(config_err)?;
        }
        let reassigned = m_step(state);
        state.delta_mu_max = state.table.max_mu_change(&previous);
        let entry = IterationLog {
            iteration: state.iteration,
            lr,
            epochs_run: summary.epochs_run,
            nll_before: summary.nll_before,
            nll_after: summary.nll_after,
            val_nll: summary.val_nll,
            delta_mu_max: state.delta_mu_max,
            reassigned_count: reassigned,
        };
        info!(
            "iteration {}: nll {:.5} -> {:.5}, delta_mu_max {:.4} s, reassigned {}, epochs {}",
            entry.iteration, entry.nll_before, entry.nll_after, entry.delta_mu_max, reassigned, entry.epochs_run
        );
        state.log.push(entry);
        if state.delta_mu_max < cfg.delta_mu_tol {
            state.stop = Some(StopReason::MuConverged);
        } else if reassigned == 0 {
            state.stop = Some(StopReason::NoReassignment);
        } else if state.iteration >= cfg.max_em_iters {
            state.stop = Some(StopReason::MaxIterations);
        }
    }
    Ok(())
}

/// Full training run from scratch.
pub fn run_em(
    net: &RoadNetwork,
    train: &[SparseTrajectory],
    val: &[SparseTrajectory],
    config: EmConfig,
) -> Result<(TravelTimeTable, EmState), EmError> {
    let model = SpatioTemporalModel::new(net, config.model.clone());
    let mut state = EmState::init(net, &model, train, val, config)?;
    continue_em(net, &model, &mut state)?;
    Ok((state.table.clone(), state))
}

/// Estimate for one gap of a trajectory at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub position: usize,
    pub time_step: usize,
    pub route: Option<Route>,
    pub seconds: f64,
    pub sigma: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEstimate {
    pub trajectory_id: u64,
    /// Sum of the successful pair estimates.
    pub total_seconds: f64,
    pub total_sigma: f64,
    pub pairs: Vec<PairEstimate>,
    /// Fraction of pairs that produced an estimate.
    pub coverage: f64,
    pub complete: bool,
}

impl TrajectoryEstimate {
    /// Concatenated inferred route of the successful pairs.
    pub fn route(&self) -> Vec<SegmentId> {
        self.pairs
            .iter()
            .filter_map(|p| p.route.as_ref())
            .flat_map(|r| r.segment_ids.iter().copied())
            .collect()
    }
}

/// Travel-time estimate of a trajectory from its fixes and departure time
/// only. Each gap takes the candidate with the smallest summed mean at the
/// time step reached by the running estimate; the total is the sum of the
/// gap estimates.
pub fn infer_trajectory(
    table: &TravelTimeTable,
    net: &RoadNetwork,
    traj: &SparseTrajectory,
    m: usize,
    tau: f64,
) -> TrajectoryEstimate {
    let mut clock = traj.departure();
    let snapped: Vec<Result<NodeId, String>> = traj
        .fixes
        .iter()
        .map(|f| net.snap_point(f.lon, f.lat).map_err(|e| e.to_string()))
        .collect();
    let mut pairs = Vec::with_capacity(traj.fixes.len().saturating_sub(1));
    for k in 0..traj.fixes.len().saturating_sub(1) {
        let ts = time_step_of(clock);
        let failed = |msg: String| PairEstimate {
            position: k,
            time_step: ts,
            route: None,
            seconds: 0.0,
            sigma: 0.0,
            error: Some(msg),
        };
        let (o, d) = match (&snapped[k], &snapped[k + 1]) {
            (Ok(o), Ok(d)) => (*o, *d),
            (Err(e), _) | (_, Err(e)) => {
                pairs.push(failed(e.clone()));
                continue;
            }
        };
        if o == d {
            pairs.push(PairEstimate {
                position: k,
                time_step: ts,
                route: Some(Route::empty()),
                seconds: 0.0,
                sigma: 0.0,
                error: None,
            });
            continue;
        }
        match candidate_set(net, &table.mu_column(ts), o, d, m, tau) {
            Ok(c) => {
                let best = c
                    .routes
                    .iter()
                    .map(|r| (aggregate_route(r, table, ts), r))
                    .min_by(|a, b| better((a.0 .0, a.1), (b.0 .0, b.1)))
                    .expect("candidate sets are nonempty");
                let ((mu, sigma), route) = best;
                clock += mu;
                pairs.push(PairEstimate {
                    position: k,
                    time_step: ts,
                    route: Some(route.clone()),
                    seconds: mu,
                    sigma,
                    error: None,
                });
            }
            Err(e) => pairs.push(failed(e.to_string())),
        }
    }
    let ok: Vec<&PairEstimate> = pairs.iter().filter(|p| p.error.is_none()).collect();
    let total_seconds = ok.iter().map(|p| p.seconds).sum();
    let total_sigma = ok.iter().map(|p| p.sigma * p.sigma).sum::<f64>().sqrt();
    let coverage = if pairs.is_empty() {
        1.0
    } else {
        ok.len() as f64 / pairs.len() as f64
    };
    TrajectoryEstimate {
        trajectory_id: traj.id,
        total_seconds,
        total_sigma,
        complete: ok.len() == pairs.len(),
        coverage,
        pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{NetworkFile, NodeRecord, SegmentRecord};
    use crate::simkit::Fix;

    /// Nodes on a line 0.001° apart; edges `(from, to, length)` one-way,
    /// 36 kph so the free-flow time is `length / 10`.
    fn line_net(n: u64, edges: &[(u64, u64, f64)]) -> RoadNetwork {
        RoadNetwork::from_records(&NetworkFile {
            nodes: (0..n)
                .map(|i| NodeRecord {
                    id: i.into(),
                    lon: 0.01 * i as f64,
                    lat: 0.0,
                })
                .collect(),
            segments: edges
                .iter()
                .enumerate()
                .map(|(i, &(a, b, len))| SegmentRecord {
                    id: (i as u64).into(),
                    from: a.into(),
                    to: b.into(),
                    length_m: len,
                    class: "tertiary".into(),
                    lanes: 1,
                    oneway: true,
                    speed_limit_kph: 36.0,
                })
                .collect(),
        })
        .unwrap()
    }

    fn traj(id: u64, net: &RoadNetwork, stops: &[(u32, f64)]) -> SparseTrajectory {
        SparseTrajectory {
            id,
            fixes: stops
                .iter()
                .map(|&(n, ts)| {
                    let node = net.node(NodeId(n));
                    Fix {
                        lon: node.lon,
                        lat: node.lat,
                        ts,
                    }
                })
                .collect(),
            weather_id: 0,
            holiday_id: 0,
        }
    }

    const T0: f64 = 1_538_524_800.0 + 12.0 * 3600.0;

    #[test]
    fn pairs_per_trajectory() {
        let net = line_net(5, &[(0, 1, 100.0), (1, 2, 100.0), (2, 3, 100.0), (3, 4, 100.0)]);
        let t = traj(7, &net, &[(0, T0), (1, T0 + 10.0), (2, T0 + 20.0), (3, T0 + 30.0), (4, T0 + 45.0)]);
        let (pairs, stats) = build_pairs(&net, &[t], 5, 0.8).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(stats.dropped(), 0);
        assert_eq!(pairs[3].observed, 15.0);
        assert_eq!(pairs[3].position, 3);
        assert!(pairs.iter().all(|p| p.trajectory_id == 7));
        assert_eq!(pairs[0].time_step(), 24);
    }

    #[test]
    fn degenerate_and_unreachable_pairs_are_dropped() {
        let net = line_net(4, &[(0, 1, 100.0), (1, 2, 100.0)]);
        let t = traj(1, &net, &[(0, T0), (0, T0 + 5.0), (2, T0 + 25.0), (3, T0 + 40.0)]);
        let (pairs, stats) = build_pairs(&net, &[t], 5, 0.8).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(stats.degenerate, 1);
        assert_eq!(stats.no_path, 1);
        let far = SparseTrajectory {
            fixes: vec![Fix { lon: 50.0, lat: 50.0, ts: T0 }, Fix { lon: 0.0, lat: 0.0, ts: T0 + 9.0 }],
            ..traj(2, &net, &[])
        };
        let (_, stats) = build_pairs(&net, &[far], 5, 0.8).unwrap();
        assert_eq!(stats.snap_failed, 1);
    }

    fn three_way() -> (RoadNetwork, CandidateSet) {
        // 0 -> 3 directly (2900 m), via 1 (3100 m) and via 2 (5000 m)
        let net = line_net(
            4,
            &[(0, 3, 2900.0), (0, 1, 1500.0), (1, 3, 1600.0), (0, 2, 2500.0), (2, 3, 2500.0)],
        );
        let c = candidate_set(&net, &net.base_times(), NodeId(0), NodeId(3), 5, 1.0).unwrap();
        (net, c)
    }

    #[test]
    fn selection_breaks_ties_by_length() {
        let (net, c) = three_way();
        assert_eq!(c.routes.len(), 3);
        let table = TravelTimeTable::free_flow(&net, 1.0);
        let sums: Vec<f64> = c.routes.iter().map(|r| aggregate_route(r, &table, 0).0).collect();
        assert_eq!(sums, vec![290.0, 310.0, 500.0]);
        assert_eq!(select_route(&c, 300.0, &table, 0, false), 0);
        assert_eq!(select_route(&c, 480.0, &table, 0, false), 2);
        let single = CandidateSet {
            routes: vec![c.routes[2].clone()],
            ..c.clone()
        };
        assert_eq!(select_route(&single, 300.0, &table, 0, false), 0);
    }

    #[test]
    fn nll_assignment_uses_spread() {
        let (net, c) = three_way();
        let mut table = TravelTimeTable::free_flow(&net, 1.0);
        // widen the long route so it explains a 390 s gap better
        for s in [3, 4] {
            table.sigma[[s, 0]] = 80.0;
        }
        assert_eq!(select_route(&c, 390.0, &table, 0, false), 1);
        assert_eq!(select_route(&c, 390.0, &table, 0, true), 2);
    }

    fn small_config() -> EmConfig {
        EmConfig {
            model: ModelConfig {
                hidden: 4,
                ..ModelConfig::default()
            },
            patience: 0,
            ..EmConfig::default()
        }
    }

    #[test]
    fn zero_iterations_return_free_flow() {
        let net = line_net(3, &[(0, 1, 100.0), (1, 2, 300.0)]);
        let t = traj(1, &net, &[(0, T0), (2, T0 + 90.0)]);
        let (table, state) = run_em(
            &net,
            &[t],
            &[],
            EmConfig {
                max_em_iters: 0,
                ..small_config()
            },
        )
        .unwrap();
        assert_eq!(table.mu, TravelTimeTable::free_flow(&net, 1.0).mu);
        assert_eq!(state.stop, Some(StopReason::MaxIterations));
        assert!(state.nll_history.is_empty());
    }

    #[test]
    fn empty_corpus_leaves_model_unchanged() {
        let net = line_net(2, &[(0, 1, 100.0)]);
        let cfg = small_config();
        let model = SpatioTemporalModel::new(&net, cfg.model.clone());
        let mut state = EmState::init(&net, &model, &[], &[], cfg).unwrap();
        let before = state.params.clone();
        let s = e_step(&model, &mut state, 3, 1e-2).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(s.nll_after, 0.0);
        assert_eq!(state.nll_history, vec![0.0]);
    }

    #[test]
    fn single_pair_converges_to_observation() {
        let net = line_net(2, &[(0, 1, 100.0)]);
        let t = traj(1, &net, &[(0, T0), (1, T0 + 25.0)]);
        let cfg = EmConfig {
            lr: 0.02,
            epochs: 300,
            max_em_iters: 3,
            ..small_config()
        };
        let (table, state) = run_em(&net, &[t], &[], cfg).unwrap();
        assert!((table.mu[[0, 24]] - 25.0).abs() < 0.5, "mu = {}", table.mu[[0, 24]]);
        assert_eq!(state.reassigned_count, 0);
        assert!(state.iteration <= 2);
        assert_eq!(state.nll_history.len(), state.iteration);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let net = line_net(4, &[(0, 1, 100.0), (1, 3, 100.0), (0, 2, 120.0), (2, 3, 90.0)]);
        let trajs: Vec<SparseTrajectory> = (0..6)
            .map(|i| traj(i, &net, &[(0, T0 + 60.0 * i as f64), (3, T0 + 60.0 * i as f64 + 22.0 + i as f64)]))
            .collect();
        let cfg = EmConfig {
            lr: 0.01,
            epochs: 4,
            max_em_iters: 4,
            delta_mu_tol: 0.0,
            batch_size: 4,
            ..small_config()
        };
        let (_, full) = run_em(&net, &trajs, &[], cfg.clone()).unwrap();

        let model = SpatioTemporalModel::new(&net, cfg.model.clone());
        let mut part = EmState::init(&net, &model, &trajs, &[], EmConfig { max_em_iters: 2, ..cfg.clone() }).unwrap();
        continue_em(&net, &model, &mut part).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        part.save(&path).unwrap();
        let mut resumed = EmState::load(&path).unwrap();
        assert_eq!(resumed, part);
        resumed.config.max_em_iters = 4;
        continue_em(&net, &model, &mut resumed).unwrap();
        assert_eq!(resumed.params.fingerprint(), full.params.fingerprint());
        assert_eq!(resumed.assignment_history, full.assignment_history);
        assert_eq!(resumed.nll_history, full.nll_history);
    }

    #[test]
    fn inference_sums_pair_estimates() {
        let net = line_net(3, &[(0, 1, 500.0), (1, 2, 300.0)]);
        let table = TravelTimeTable::free_flow(&net, 3.0);
        let one = traj(1, &net, &[(0, T0), (1, T0 + 70.0)]);
        let est = infer_trajectory(&table, &net, &one, 5, 0.8);
        assert_eq!(est.total_seconds, 50.0);
        assert_eq!(est.pairs[0].sigma, 3.0);
        let two = traj(2, &net, &[(0, T0), (1, T0 + 70.0), (2, T0 + 100.0)]);
        let est = infer_trajectory(&table, &net, &two, 5, 0.8);
        assert_eq!(est.total_seconds, est.pairs[0].seconds + est.pairs[1].seconds);
        assert_eq!(est.total_seconds, 80.0);
        assert_eq!(est.route(), vec![SegmentId(0), SegmentId(1)]);
        assert!(est.complete);
        assert_eq!(est.coverage, 1.0);
        let back = traj(3, &net, &[(2, T0), (0, T0 + 70.0)]);
        let est = infer_trajectory(&table, &net, &back, 5, 0.8);
        assert!(!est.complete);
        assert_eq!(est.coverage, 0.0);
    }

    #[test]
    fn split_is_stable_and_disjoint() {
        let net = line_net(2, &[(0, 1, 100.0)]);
        let trajs: Vec<_> = (0..200).map(|i| traj(i, &net, &[(0, T0), (1, T0 + 9.0)])).collect();
        let (a, b, c) = split_trajectories(&trajs, 0.1, 0.1, 3);
        assert_eq!(a.len() + b.len() + c.len(), 200);
        assert!(b.len() > 5 && c.len() > 5);
        let (a2, _, _) = split_trajectories(&trajs[..100], 0.1, 0.1, 3);
        assert!(a2.iter().all(|t| a.iter().any(|u| u.id == t.id)));
    }
}
