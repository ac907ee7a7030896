//! Experiment configuration: one TOML document with a section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparse_eta::emtrain::{EmConfig, InitialAssignment};
use sparse_eta::pathing::{DEFAULT_CANDIDATES, DEFAULT_DIVERSITY_THRESHOLD};
use sparse_eta::simkit::{
    mix_seed, ClassPlan, CongestionProfile, DepartureProfile, FixPlacement, RouteChoice, TripConfig, DEFAULT_DAY_START,
};
use sparse_eta::stmodel::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own seed from it. Required.
    pub seed: Option<u64>,
    /// Worker threads; unset uses every core.
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub network: NetworkSection,
    pub simulation: SimulationSection,
    pub sampling: SamplingSection,
    pub split: SplitSection,
    pub candidates: CandidateSection,
    pub model: ModelConfig,
    pub em: EmSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            threads: None,
            out: PathBuf::from("runs"),
            network: NetworkSection::default(),
            simulation: SimulationSection::default(),
            sampling: SamplingSection::default(),
            split: SplitSection::default(),
            candidates: CandidateSection::default(),
            model: ModelConfig::default(),
            em: EmSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Network JSON file; when unset a grid is generated.
    pub path: Option<PathBuf>,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    pub artery_stride: usize,
    pub length_jitter: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 8,
            cols: 8,
            spacing_m: 500.0,
            artery_stride: ClassPlan::default().artery_stride,
            length_jitter: 0.0,
        }
    }
}

impl GridSpec {
    pub fn class_plan(&self) -> ClassPlan {
        ClassPlan {
            artery_stride: self.artery_stride,
            length_jitter: self.length_jitter,
            ..ClassPlan::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub trips: usize,
    pub min_hops: usize,
    /// `[time_step, weight]` departure slots; unset means uniform 06:00-22:00.
    pub departure_slots: Option<Vec<(usize, f64)>>,
    /// Probabilities over the fastest true routes; a single route rank can
    /// be forced with `route_rank`.
    pub route_weights: Vec<f64>,
    pub route_rank: Option<usize>,
    pub day_start: f64,
    pub weather_id: usize,
    pub holiday_id: usize,
    pub placement: FixPlacement,
    pub congestion: CongestionProfile,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let trips = TripConfig::default();
        SimulationSection {
            trips: trips.trips,
            min_hops: trips.min_hops,
            departure_slots: None,
            route_weights: match RouteChoice::default() {
                RouteChoice::Weighted(w) => w,
                RouteChoice::Rank(_) => vec![1.0],
            },
            route_rank: None,
            day_start: DEFAULT_DAY_START,
            weather_id: 0,
            holiday_id: 0,
            placement: FixPlacement::default(),
            congestion: CongestionProfile::default(),
        }
    }
}

impl SimulationSection {
    pub fn trip_config(&self, seed: u64) -> TripConfig {
        TripConfig {
            trips: self.trips,
            min_hops: self.min_hops,
            departures: match &self.departure_slots {
                Some(slots) => DepartureProfile { slots: slots.clone() },
                None => DepartureProfile::daytime(),
            },
            route_choice: match self.route_rank {
                Some(r) => RouteChoice::Rank(r),
                None => RouteChoice::Weighted(self.route_weights.clone()),
            },
            day_start: self.day_start,
            weather_id: self.weather_id,
            holiday_id: self.holiday_id,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub keep_ratios: Vec<f64>,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            keep_ratios: vec![0.125, 0.0625, 0.03125],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateSection {
    pub m: usize,
    pub tau: f64,
}

impl Default for CandidateSection {
    fn default() -> Self {
        CandidateSection {
            m: DEFAULT_CANDIDATES,
            tau: DEFAULT_DIVERSITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub max_em_iters: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub delta_mu_tol: f64,
    pub patience: usize,
    pub initial_assignment: InitialAssignment,
    pub use_nll_assignment: bool,
    pub refresh_candidates_every_iter: bool,
}

impl Default for EmSection {
    fn default() -> Self {
        let em = EmConfig::default();
        EmSection {
            max_em_iters: em.max_em_iters,
            epochs: em.epochs,
            lr: em.lr,
            lr_decay: em.lr_decay,
            batch_size: em.batch_size,
            delta_mu_tol: em.delta_mu_tol,
            patience: em.patience,
            initial_assignment: em.initial_assignment,
            use_nll_assignment: em.use_nll_assignment,
            refresh_candidates_every_iter: em.refresh_candidates_every_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Time steps exported as condition maps (06:00 and 17:00 by default).
    pub condition_steps: Vec<usize>,
    /// Count a reversed traversal as overlap in route accuracy.
    pub undirected_overlap: bool,
    /// Minimum traversals of a (segment, time step) cell for mean recovery.
    pub min_count: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            condition_steps: vec![12, 34],
            undirected_overlap: false,
            min_count: 30,
        }
    }
}

/// Seeds of the individual stages, derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub network: u64,
    pub truth: u64,
    pub trips: u64,
    pub split: u64,
    pub em: u64,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("invalid experiment config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies flag overrides and checks the result.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            bail!("a seed is required (set `seed` in the config or pass --seed)");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        if let Some(p) = &self.network.path {
            if !p.exists() {
                bail!("network file {} does not exist", p.display());
            }
        }
        if self.sampling.keep_ratios.is_empty() {
            bail!("sampling.keep_ratios is empty");
        }
        for &r in &self.sampling.keep_ratios {
            if !(r > 0.0 && r <= 1.0) {
                bail!("keep ratio {r} is outside (0, 1]");
            }
        }
        let mut labels: Vec<String> = self.sampling.keep_ratios.iter().map(|&r| ratio_label(r)).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.sampling.keep_ratios.len() {
            bail!("sampling.keep_ratios contains duplicates");
        }
        let (v, t) = (self.split.val_frac, self.split.test_frac);
        if !(v >= 0.0 && t >= 0.0 && v + t < 1.0) {
            bail!("split fractions must be nonnegative and sum to less than 1");
        }
        if self.eval.condition_steps.iter().any(|&s| s >= sparse_eta::stmodel::TIME_STEPS) {
            bail!("eval.condition_steps must be below {}", sparse_eta::stmodel::TIME_STEPS);
        }
        self.em_config().validate()?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn stage_seeds(&self) -> StageSeeds {
        let s = self.seed();
        StageSeeds {
            network: mix_seed(s, 1),
            truth: mix_seed(s, 2),
            trips: mix_seed(s, 3),
            split: mix_seed(s, 4),
            em: mix_seed(s, 5),
        }
    }

    pub fn em_config(&self) -> EmConfig {
        let e = &self.em;
        EmConfig {
            m: self.candidates.m,
            tau: self.candidates.tau,
            max_em_iters: e.max_em_iters,
            epochs: e.epochs,
            lr: e.lr,
            lr_decay: e.lr_decay,
            batch_size: e.batch_size,
            delta_mu_tol: e.delta_mu_tol,
            patience: e.patience,
            seed: self.seed.map_or(0, |s| mix_seed(s, 5)),
            refresh_candidates_every_iter: e.refresh_candidates_every_iter,
            use_nll_assignment: e.use_nll_assignment,
            initial_assignment: e.initial_assignment,
            model: self.model.clone(),
            reference_context: None,
        }
    }
}

/// File label of a keep ratio: the resulting sampling interval, e.g.
/// `0.125 -> "2min"`.
pub fn ratio_label(keep_ratio: f64) -> String {
    let seconds = sparse_eta::simkit::TICK_SECONDS / keep_ratio;
    if seconds >= 60.0 && (seconds / 60.0).fract() == 0.0 {
        format!("{}min", seconds / 60.0)
    } else {
        format!("{seconds}s")
    }
}
