//! Synthetic ground truth: grid road networks, time-varying true travel
//! times, trips along known routes, and sparsification of the resulting
//! dense trajectories to a target sampling rate.
//!
//! Simulated durations are rounded to multiples of [`TIME_QUANTUM`] so that
//! sums of segment times, absolute timestamps and differences of
//! timestamps are all exact in `f64`.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::{
    NetworkFile, NodeId, NodeRecord, RoadClass, RoadNetwork, SegmentId, SegmentRecord, EARTH_RADIUS_M,
};
use crate::pathing::{k_shortest_paths, PathError, Route};
use crate::stmodel::{time_step_of, TemporalContext, STEP_SECONDS, TIME_STEPS};

/// Resolution of simulated times, in seconds (2⁻¹⁰ s).
pub const TIME_QUANTUM: f64 = 1.0 / 1024.0;
/// Spacing of the dense GPS ticks that sparsification resamples to.
pub const TICK_SECONDS: f64 = 15.0;
/// 2018-10-03 00:00:00 UTC, a Wednesday; default simulated day.
pub const DEFAULT_DAY_START: f64 = 1_538_524_800.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Format {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn quantize(t: f64) -> f64 {
    (t / TIME_QUANTUM).round() * TIME_QUANTUM
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Road classes and speeds of a generated grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPlan {
    /// Every `artery_stride`-th row (starting at row 0) is an artery.
    pub artery_stride: usize,
    pub artery_class: RoadClass,
    pub artery_kph: f64,
    pub artery_lanes: u32,
    pub local_class: RoadClass,
    pub local_kph: f64,
    pub local_lanes: u32,
    /// Relative uniform jitter on segment lengths; 0 keeps the exact spacing.
    pub length_jitter: f64,
}

impl Default for ClassPlan {
    fn default() -> Self {
        ClassPlan {
            artery_stride: 3,
            artery_class: RoadClass::Primary,
            artery_kph: 60.0,
            artery_lanes: 3,
            local_class: RoadClass::Tertiary,
            local_kph: 30.0,
            local_lanes: 1,
            length_jitter: 0.0,
        }
    }
}

/// `rows × cols` lattice of two-way roads. Node `(r, c)` gets id `r·cols + c`.
pub fn gen_grid_network(
    rows: usize,
    cols: usize,
    spacing_m: f64,
    plan: &ClassPlan,
    seed: u64,
) -> Result<RoadNetwork, SimError> {
    if rows < 2 || cols < 2 {
        return Err(SimError::Invalid(format!("grid must be at least 2x2, got {rows}x{cols}")));
    }
    if !(spacing_m > 0.0) || plan.artery_stride == 0 || !(0.0..1.0).contains(&plan.length_jitter) {
        return Err(SimError::Invalid("spacing, stride or jitter out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lon0, lat0): (f64, f64) = (108.90, 34.20);
    let dlat = (spacing_m / EARTH_RADIUS_M).to_degrees();
    let dlon = dlat / lat0.to_radians().cos();
    let key = |r: usize, c: usize| ((r * cols + c) as u64).into();

    let nodes = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| NodeRecord {
            id: key(r, c),
            lon: lon0 + c as f64 * dlon,
            lat: lat0 + r as f64 * dlat,
        })
        .collect();

    let mut segments = Vec::new();
    let mut road = |from, to, artery: bool, rng: &mut ChaCha8Rng| {
        let jitter = if plan.length_jitter > 0.0 {
            rng.random_range(-plan.length_jitter..plan.length_jitter)
        } else {
            0.0
        };
        let (class, kph, lanes) = if artery {
            (plan.artery_class, plan.artery_kph, plan.artery_lanes)
        } else {
            (plan.local_class, plan.local_kph, plan.local_lanes)
        };
        segments.push(SegmentRecord {
            id: (segments.len() as u64).into(),
            from,
            to,
            length_m: spacing_m * (1.0 + jitter),
            class: class.as_str().to_owned(),
            lanes,
            oneway: false,
            speed_limit_kph: kph,
        });
    };
    for r in 0..rows {
        for c in 0..cols - 1 {
            road(key(r, c), key(r, c + 1), r % plan.artery_stride == 0, &mut rng);
        }
    }
    for c in 0..cols {
        for r in 0..rows - 1 {
            road(key(r, c), key(r + 1, c), false, &mut rng);
        }
    }
    RoadNetwork::from_records(&NetworkFile { nodes, segments })
        .map_err(|e| SimError::Invalid(e.to_string()))
}

/// Shape of the daily congestion pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CongestionProfile {
    /// Half-open time-step ranges of the morning and evening peaks.
    pub morning: (usize, usize),
    pub evening: (usize, usize),
    pub peak_major: f64,
    pub peak_secondary: f64,
    pub peak_minor: f64,
    /// Coefficient of variation of segment travel time.
    pub cv: f64,
    /// Per-segment multiplicative noise, uniform in `[1 - a, 1 + a]`.
    pub segment_noise: f64,
}

impl Default for CongestionProfile {
    fn default() -> Self {
        CongestionProfile {
            // 08:00-09:30 and 17:00-18:30
            morning: (16, 19),
            evening: (34, 37),
            peak_major: 2.5,
            peak_secondary: 2.0,
            peak_minor: 1.5,
            cv: 0.15,
            segment_noise: 0.05,
        }
    }
}

impl CongestionProfile {
    pub fn is_peak(&self, ts: usize) -> bool {
        (self.morning.0..self.morning.1).contains(&ts) || (self.evening.0..self.evening.1).contains(&ts)
    }

    pub fn peak_for(&self, class: RoadClass) -> f64 {
        use RoadClass::*;
        match class {
            Trunk | TrunkLink | FreewayLink | Primary | PrimaryLink => self.peak_major,
            Secondary | SecondaryLink => self.peak_secondary,
            Tertiary | TertiaryLink => self.peak_minor,
        }
    }

    pub fn multiplier(&self, ts: usize, class: RoadClass) -> f64 {
        if self.is_peak(ts) {
            self.peak_for(class)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_mu: Array2<f64>,
    pub true_sigma: Array2<f64>,
    /// Congestion multiplier per road class (rows) and time step (columns).
    pub rush_profile: Array2<f64>,
    pub seed: u64,
}

impl GroundTruth {
    pub fn mu(&self, seg: SegmentId, ts: usize) -> f64 {
        self.true_mu[[seg.index(), ts]]
    }

    pub fn sigma(&self, seg: SegmentId, ts: usize) -> f64 {
        self.true_sigma[[seg.index(), ts]]
    }
}

pub fn gen_ground_truth(net: &RoadNetwork, profile: &CongestionProfile, seed: u64) -> GroundTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rush_profile = Array2::from_shape_fn((RoadClass::COUNT, TIME_STEPS), |(c, ts)| {
        profile.multiplier(ts, RoadClass::ALL[c])
    });
    let noise: Vec<f64> = net
        .segments()
        .iter()
        .map(|_| {
            if profile.segment_noise > 0.0 {
                1.0 + rng.random_range(-profile.segment_noise..profile.segment_noise)
            } else {
                1.0
            }
        })
        .collect();
    let base = net.base_times();
    let true_mu = Array2::from_shape_fn((net.num_segments(), TIME_STEPS), |(i, ts)| {
        base[i] * rush_profile[[net.segments()[i].road_class.index(), ts]] * noise[i]
    });
    let true_sigma = true_mu.mapv(|m| profile.cv * m);
    GroundTruth {
        true_mu,
        true_sigma,
        rush_profile,
        seed,
    }
}

/// Moment-matched lognormal parameters `(log_mu, log_sigma)` with the given
/// mean and standard deviation.
pub fn to_lognormal(mu: f64, sigma: f64) -> (f64, f64) {
    let log_var = (sigma * sigma / (mu * mu)).ln_1p();
    (mu.ln() - 0.5 * log_var, log_var.sqrt())
}

/// Mean and standard deviation of `Lognormal(log_mu, log_sigma)`.
pub fn lognormal_moments(log_mu: f64, log_sigma: f64) -> (f64, f64) {
    let s2 = log_sigma * log_sigma;
    let mean = (log_mu + 0.5 * s2).exp();
    (mean, mean * s2.exp_m1().sqrt())
}

/// Draw from the moment-matched lognormal truncated to `[0.25μ, 4μ]`.
pub fn sample_segment_time(mu: f64, sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma <= 0.0 {
        return mu;
    }
    let (lm, ls) = to_lognormal(mu, sigma);
    let dist = LogNormal::new(lm, ls).expect("finite lognormal parameters");
    let (lo, hi) = (0.25 * mu, 4.0 * mu);
    for _ in 0..64 {
        let x = dist.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    dist.sample(rng).clamp(lo, hi)
}

/// How the simulated driver picks among the fastest routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RouteChoice {
    /// Probabilities over the fastest routes in rank order.
    Weighted(Vec<f64>),
    /// Always the route of this rank (0 = fastest), or the slowest available.
    Rank(usize),
}

impl Default for RouteChoice {
    fn default() -> Self {
        RouteChoice::Weighted(vec![0.7, 0.2, 0.1])
    }
}

/// A simulated trip: the true route and the time it passed every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTrajectory {
    pub id: u64,
    pub origin: NodeId,
    pub route: Route,
    pub departure: f64,
    /// Seconds since departure at each traversed node; starts at 0 and has
    /// one more entry than the route has segments.
    pub node_offsets: Vec<f64>,
    pub context: TemporalContext,
}

impl DenseTrajectory {
    pub fn node_times(&self) -> Vec<f64> {
        self.node_offsets.iter().map(|o| self.departure + o).collect()
    }

    pub fn segment_times(&self) -> Vec<f64> {
        self.node_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn total_time(&self) -> f64 {
        *self.node_offsets.last().unwrap_or(&0.0)
    }

    pub fn nodes(&self, net: &RoadNetwork) -> Vec<NodeId> {
        self.route.nodes(net, self.origin)
    }

    /// Index of the node passed exactly at `unix_ts`, if any.
    pub fn node_index_at(&self, unix_ts: f64) -> Option<usize> {
        self.node_offsets
            .iter()
            .position(|o| self.departure + o == unix_ts)
    }

    /// True sub-route between the nodes passed at two timestamps.
    pub fn subroute(&self, from_ts: f64, to_ts: f64) -> Option<&[SegmentId]> {
        let a = self.node_index_at(from_ts)?;
        let b = self.node_index_at(to_ts)?;
        (a <= b).then(|| &self.route.segment_ids[a..b])
    }
}

/// Simulates one trip departing at `departure` between `od`.
pub fn gen_trip(
    net: &RoadNetwork,
    truth: &GroundTruth,
    od: (NodeId, NodeId),
    departure: f64,
    choice: &RouteChoice,
    context: TemporalContext,
    id: u64,
    rng: &mut impl Rng,
) -> Result<DenseTrajectory, SimError> {
    let ts0 = time_step_of(departure);
    let weights: Vec<f64> = truth.true_mu.column(ts0).to_vec();
    let options = match choice {
        RouteChoice::Weighted(p) => k_shortest_paths(net, &weights, od.0, od.1, p.len().max(1))?,
        RouteChoice::Rank(r) => k_shortest_paths(net, &weights, od.0, od.1, r + 1)?,
    };
    let pick = match choice {
        RouteChoice::Weighted(p) => {
            let total: f64 = p[..options.len()].iter().sum();
            let mut u = rng.random_range(0.0..total);
            let mut pick = options.len() - 1;
            for (i, w) in p[..options.len()].iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        }
        RouteChoice::Rank(r) => (*r).min(options.len() - 1),
    };
    let chosen = &options[pick];
    let mut offsets = Vec::with_capacity(chosen.len() + 1);
    let mut clock = 0.0;
    offsets.push(clock);
    for &seg in &chosen.segment_ids {
        let ts = time_step_of(departure + clock);
        let dt = quantize(sample_segment_time(truth.mu(seg, ts), truth.sigma(seg, ts), rng)).max(TIME_QUANTUM);
        clock += dt;
        offsets.push(clock);
    }
    let route = Route::from_segments(net, &weights, chosen.segment_ids.clone());
    Ok(DenseTrajectory {
        id,
        origin: od.0,
        route,
        departure,
        node_offsets: offsets,
        context,
    })
}

/// Uniform sampler over node pairs at least `min_hops` segments apart.
#[derive(Debug, Clone)]
pub struct OdSampler {
    pairs: Vec<(NodeId, NodeId)>,
}

impl OdSampler {
    pub fn new(net: &RoadNetwork, min_hops: usize) -> Self {
        let n = net.num_nodes();
        let mut pairs = Vec::new();
        for s in 0..n {
            let mut hops = vec![usize::MAX; n];
            hops[s] = 0;
            let mut queue = VecDeque::from([NodeId(s as u32)]);
            while let Some(u) = queue.pop_front() {
                for &seg in net.outgoing(u) {
                    let v = net.segment(seg).to;
                    if hops[v.index()] == usize::MAX {
                        hops[v.index()] = hops[u.index()] + 1;
                        queue.push_back(v);
                    }
                }
            }
            pairs.extend(
                (0..n)
                    .filter(|&t| hops[t] != usize::MAX && hops[t] >= min_hops && t != s)
                    .map(|t| (NodeId(s as u32), NodeId(t as u32))),
            );
        }
        OdSampler { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (NodeId, NodeId) {
        self.pairs[rng.random_range(0..self.pairs.len())]
    }
}

/// Weighted choice of departure slot; the time within the slot is uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepartureProfile {
    pub slots: Vec<(usize, f64)>,
}

impl DepartureProfile {
    /// Uniform over 06:00-22:00.
    pub fn daytime() -> Self {
        DepartureProfile {
            slots: (12..44).map(|ts| (ts, 1.0)).collect(),
        }
    }

    pub fn sample_offset(&self, rng: &mut impl Rng) -> f64 {
        let total: f64 = self.slots.iter().map(|s| s.1).sum();
        let mut u = rng.random_range(0.0..total);
        let mut slot = self.slots.last().expect("at least one slot").0;
        for &(ts, w) in &self.slots {
            if u < w {
                slot = ts;
                break;
            }
            u -= w;
        }
        slot as f64 * STEP_SECONDS + rng.random_range(0..STEP_SECONDS as u32) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripConfig {
    pub trips: usize,
    pub min_hops: usize,
    pub departures: DepartureProfile,
    pub route_choice: RouteChoice,
    pub day_start: f64,
    pub weather_id: usize,
    pub holiday_id: usize,
    pub seed: u64,
}

impl Default for TripConfig {
    fn default() -> Self {
        TripConfig {
            trips: 2000,
            min_hops: 6,
            departures: DepartureProfile::daytime(),
            route_choice: RouteChoice::default(),
            day_start: DEFAULT_DAY_START,
            weather_id: 0,
            holiday_id: 0,
            seed: 0,
        }
    }
}

/// Generates `cfg.trips` trips; trip `i` uses its own seed derived from
/// `(cfg.seed, i)`, so the output does not depend on the thread count.
pub fn gen_trips(net: &RoadNetwork, truth: &GroundTruth, cfg: &TripConfig) -> Result<Vec<DenseTrajectory>, SimError> {
    let sampler = OdSampler::new(net, cfg.min_hops);
    if sampler.is_empty() && cfg.trips > 0 {
        return Err(SimError::Invalid(format!("no node pairs are {} hops apart", cfg.min_hops)));
    }
    (0..cfg.trips)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, i as u64));
            let od = sampler.sample(&mut rng);
            let departure = cfg.day_start + cfg.departures.sample_offset(&mut rng);
            let context = TemporalContext::at(departure, cfg.weather_id, cfg.holiday_id);
            gen_trip(net, truth, od, departure, &cfg.route_choice, context, i as u64, &mut rng)
        })
        .collect()
}

/// Number of trips entering each segment during each time step.
pub fn traversal_counts(trips: &[DenseTrajectory], num_segments: usize) -> Array2<u32> {
    let mut counts = Array2::zeros((num_segments, TIME_STEPS));
    for t in trips {
        for (k, seg) in t.route.segment_ids.iter().enumerate() {
            counts[[seg.index(), time_step_of(t.departure + t.node_offsets[k])]] += 1;
        }
    }
    counts
}

/// One GPS fix; serialized as `[lon, lat, unix_ts]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Fix {
    pub lon: f64,
    pub lat: f64,
    pub ts: f64,
}

impl From<[f64; 3]> for Fix {
    fn from(v: [f64; 3]) -> Self {
        Fix {
            lon: v[0],
            lat: v[1],
            ts: v[2],
        }
    }
}

impl From<Fix> for [f64; 3] {
    fn from(f: Fix) -> Self {
        [f.lon, f.lat, f.ts]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTrajectory {
    pub id: u64,
    pub fixes: Vec<Fix>,
    pub weather_id: usize,
    pub holiday_id: usize,
}

impl SparseTrajectory {
    pub fn total_time(&self) -> f64 {
        match (self.fixes.first(), self.fixes.last()) {
            (Some(a), Some(b)) => b.ts - a.ts,
            _ => 0.0,
        }
    }

    pub fn departure(&self) -> f64 {
        self.fixes.first().map_or(0.0, |f| f.ts)
    }
}

/// Where sparse fixes are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixPlacement {
    /// Each kept tick moves to the route node passed closest in time, and
    /// carries that node's coordinates and passage time.
    #[default]
    Nodes,
    /// Each kept tick is placed on the route by linear interpolation and
    /// keeps the tick's exact time.
    Interpolated,
}

/// Tick offsets (seconds since departure) kept at `keep_ratio`: every
/// `round(1 / keep_ratio)`-th 15 s tick plus the trip end.
pub fn kept_ticks(total: f64, keep_ratio: f64) -> Vec<f64> {
    if total < TICK_SECONDS {
        return vec![0.0, total];
    }
    let step = (1.0 / keep_ratio).round().max(1.0) as usize;
    let n_ticks = (total / TICK_SECONDS).floor() as usize + 1;
    let mut kept: Vec<f64> = (0..n_ticks)
        .step_by(step)
        .map(|k| k as f64 * TICK_SECONDS)
        .collect();
    if *kept.last().expect("tick 0") < total {
        kept.push(total);
    }
    kept
}

fn interpolate(net: &RoadNetwork, dense: &DenseTrajectory, nodes: &[NodeId], t: f64) -> (f64, f64) {
    let offs = &dense.node_offsets;
    let k = offs.partition_point(|&o| o <= t).saturating_sub(1).min(offs.len().saturating_sub(2));
    if offs.len() < 2 {
        let n = net.node(nodes[0]);
        return (n.lon, n.lat);
    }
    let (a, b) = (net.node(nodes[k]), net.node(nodes[k + 1]));
    let frac = ((t - offs[k]) / (offs[k + 1] - offs[k])).clamp(0.0, 1.0);
    (a.lon + frac * (b.lon - a.lon), a.lat + frac * (b.lat - a.lat))
}

pub fn sparsify(
    net: &RoadNetwork,
    dense: &DenseTrajectory,
    keep_ratio: f64,
    placement: FixPlacement,
) -> Result<SparseTrajectory, SimError> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(SimError::Invalid(format!("keep_ratio must lie in (0, 1], got {keep_ratio}")));
    }
    let nodes = dense.nodes(net);
    let ticks = kept_ticks(dense.total_time(), keep_ratio);
    let fixes = match placement {
        FixPlacement::Interpolated => ticks
            .iter()
            .map(|&t| {
                let (lon, lat) = interpolate(net, dense, &nodes, t);
                Fix {
                    lon,
                    lat,
                    ts: dense.departure + t,
                }
            })
            .collect(),
        FixPlacement::Nodes => {
            let offs = &dense.node_offsets;
            let mut picked: Vec<usize> = ticks
                .iter()
                .map(|&t| {
                    let hi = offs.partition_point(|&o| o < t).min(offs.len() - 1);
                    let lo = hi.saturating_sub(1);
                    if (t - offs[lo]).abs() <= (offs[hi] - t).abs() {
                        lo
                    } else {
                        hi
                    }
                })
                .collect();
            picked[0] = 0;
            *picked.last_mut().expect("two ticks") = offs.len() - 1;
            picked.dedup();
            picked
                .into_iter()
                .map(|j| {
                    let n = net.node(nodes[j]);
                    Fix {
                        lon: n.lon,
                        lat: n.lat,
                        ts: dense.departure + offs[j],
                    }
                })
                .collect()
        }
    };
    Ok(SparseTrajectory {
        id: dense.id,
        fixes,
        weather_id: dense.context.weather_id,
        holiday_id: dense.context.holiday_id,
    })
}

/// Adds isotropic Gaussian position noise with standard deviation
/// `jitter_m` meters to every fix; timestamps are untouched.
pub fn jitter_fixes(traj: &mut SparseTrajectory, jitter_m: f64, rng: &mut impl Rng) -> Result<(), SimError> {
    if !(jitter_m >= 0.0 && jitter_m.is_finite()) {
        return Err(SimError::Invalid(format!("jitter_m must be finite and nonnegative, got {jitter_m}")));
    }
    if jitter_m == 0.0 {
        return Ok(());
    }
    let noise = Normal::new(0.0, (jitter_m / EARTH_RADIUS_M).to_degrees()).expect("positive spread");
    for f in &mut traj.fixes {
        let dlat = noise.sample(rng);
        let dlon = noise.sample(rng) / f.lat.to_radians().cos();
        f.lat += dlat;
        f.lon += dlon;
    }
    Ok(())
}

/// Dense ground-truth record written next to the sparse corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub id: u64,
    pub origin: u32,
    pub segments: Vec<SegmentId>,
    pub node_times: Vec<f64>,
    pub weather_id: usize,
    pub holiday_id: usize,
}

impl SidecarRecord {
    pub fn from_dense(d: &DenseTrajectory) -> Self {
        SidecarRecord {
            id: d.id,
            origin: d.origin.0,
            segments: d.route.segment_ids.clone(),
            node_times: d.node_times(),
            weather_id: d.context.weather_id,
            holiday_id: d.context.holiday_id,
        }
    }

    pub fn into_dense(self, net: &RoadNetwork) -> DenseTrajectory {
        let departure = self.node_times.first().copied().unwrap_or(0.0);
        let weights = vec![1.0; net.num_segments()];
        DenseTrajectory {
            id: self.id,
            origin: NodeId(self.origin),
            route: Route::from_segments(net, &weights, self.segments),
            departure,
            node_offsets: self.node_times.iter().map(|t| t - departure).collect(),
            context: TemporalContext::at(departure, self.weather_id, self.holiday_id),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), SimError> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>, SimError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| SimError::Format {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize) -> RoadNetwork {
        gen_grid_network(rows, cols, 500.0, &ClassPlan::default(), 7).unwrap()
    }

    #[test]
    fn grid_counts() {
        let net = grid(2, 2);
        assert_eq!((net.num_nodes(), net.num_segments()), (4, 8));
        let net = grid(8, 8);
        assert_eq!((net.num_nodes(), net.num_segments()), (64, 224));
        assert_eq!(grid(8, 8), grid(8, 8));
        assert!(gen_grid_network(1, 5, 500.0, &ClassPlan::default(), 0).is_err());
    }

    #[test]
    fn grid_classes_follow_plan() {
        let net = grid(4, 4);
        for seg in net.segments() {
            let (a, b) = (net.node(seg.from), net.node(seg.to));
            let horizontal = a.lat == b.lat;
            let row = match seg.from.0 as usize / 4 {
                r if horizontal => r,
                _ => usize::MAX,
            };
            let artery = horizontal && row % 3 == 0;
            let expect = if artery { RoadClass::Primary } else { RoadClass::Tertiary };
            assert_eq!(seg.road_class, expect);
            assert_eq!(seg.length_m, 500.0);
        }
    }

    #[test]
    fn grid_spacing_matches_haversine() {
        let net = grid(2, 2);
        for seg in net.segments() {
            let (a, b) = (net.node(seg.from), net.node(seg.to));
            let d = crate::netgraph::haversine_m(a.lon, a.lat, b.lon, b.lat);
            assert!((d - 500.0).abs() < 1.0, "{d}");
        }
    }

    #[test]
    fn ground_truth_shape() {
        let net = grid(3, 3);
        let profile = CongestionProfile {
            segment_noise: 0.0,
            ..CongestionProfile::default()
        };
        let truth = gen_ground_truth(&net, &profile, 1);
        let base = net.base_times();
        for seg in net.segments() {
            let i = seg.id.index();
            assert_eq!(truth.true_mu[[i, 12]], base[i]);
            let peak = truth.true_mu[[i, 17]] / base[i];
            let expect = if seg.road_class == RoadClass::Primary { 2.5 } else { 1.5 };
            assert!((peak - expect).abs() < 1e-12);
            assert!((truth.true_sigma[[i, 12]] - 0.15 * base[i]).abs() < 1e-12);
        }
        assert!(truth.rush_profile.iter().all(|&m| m >= 1.0));
        let flat = gen_ground_truth(&net, &CongestionProfile { cv: 0.0, ..profile }, 1);
        assert!(flat.true_sigma.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn lognormal_conversion() {
        let (lm, ls) = to_lognormal(100.0, 0.0);
        assert_eq!((lm, ls), (100f64.ln(), 0.0));
        let (lm, ls) = to_lognormal(100.0, 15.0);
        assert!((ls * ls - 0.0222506).abs() < 1e-7);
        assert!((lm - 4.594045).abs() < 1e-6);
        assert!(((lm + ls * ls / 2.0).exp() / 100.0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn deterministic_trip_uses_true_means() {
        let net = grid(4, 4);
        let truth = gen_ground_truth(
            &net,
            &CongestionProfile {
                cv: 0.0,
                ..CongestionProfile::default()
            },
            3,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dep = DEFAULT_DAY_START + 12.0 * 3600.0;
        let ctx = TemporalContext::at(dep, 0, 0);
        let trip = gen_trip(&net, &truth, (NodeId(0), NodeId(15)), dep, &RouteChoice::Rank(0), ctx, 0, &mut rng)
            .unwrap();
        for (k, dt) in trip.segment_times().iter().enumerate() {
            let mu = truth.mu(trip.route.segment_ids[k], 24);
            assert!((dt - mu).abs() <= TIME_QUANTUM / 2.0);
        }
        let sum: f64 = trip.segment_times().iter().sum();
        assert_eq!(sum, trip.total_time());
        let times = trip.node_times();
        assert_eq!(times.last().unwrap() - times.first().unwrap(), trip.total_time());
        assert!(trip.route.is_consistent(&net));
    }

    #[test]
    fn truncated_lognormal_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mean = (0..n).map(|_| sample_segment_time(100.0, 15.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 100.0).abs() < 0.6, "{mean}");
    }

    #[test]
    fn tick_selection() {
        // 10 minutes of driving at the three sparse rates.
        let all = kept_ticks(600.0, 1.0);
        assert_eq!(all.len(), 41);
        let two_min = kept_ticks(600.0, 0.125);
        assert_eq!(two_min, vec![0.0, 120.0, 240.0, 360.0, 480.0, 600.0]);
        let eight_min = kept_ticks(600.0, 0.03125);
        assert_eq!(eight_min, vec![0.0, 480.0, 600.0]);
        assert_eq!(kept_ticks(10.0, 0.125), vec![0.0, 10.0]);
    }

    #[test]
    fn sparsify_preserves_gaps() {
        let net = grid(8, 8);
        let truth = gen_ground_truth(&net, &CongestionProfile::default(), 5);
        let cfg = TripConfig {
            trips: 20,
            seed: 8,
            ..TripConfig::default()
        };
        let trips = gen_trips(&net, &truth, &cfg).unwrap();
        for trip in &trips {
            let sparse = sparsify(&net, trip, 0.125, FixPlacement::Nodes).unwrap();
            assert!(sparse.fixes.len() >= 2);
            assert_eq!(sparse.fixes[0].ts, trip.departure);
            assert_eq!(sparse.total_time(), trip.total_time());
            let seg_times = trip.segment_times();
            for w in sparse.fixes.windows(2) {
                assert!(w[1].ts > w[0].ts);
                let a = trip.node_index_at(w[0].ts).unwrap();
                let b = trip.node_index_at(w[1].ts).unwrap();
                let dense_sum: f64 = seg_times[a..b].iter().sum();
                assert_eq!(w[1].ts - w[0].ts, dense_sum);
                let snapped = net.snap_point(w[0].lon, w[0].lat).unwrap();
                assert_eq!(snapped, trip.nodes(&net)[a]);
            }

            let interp = sparsify(&net, trip, 0.125, FixPlacement::Interpolated).unwrap();
            for w in interp.fixes.windows(2).take(interp.fixes.len().saturating_sub(2)) {
                assert_eq!(w[1].ts - w[0].ts, 120.0);
            }
        }
    }

    #[test]
    fn jitter_moves_fixes_by_about_the_spread() {
        let net = grid(4, 4);
        let truth = gen_ground_truth(&net, &CongestionProfile::default(), 1);
        let cfg = TripConfig {
            trips: 1,
            min_hops: 3,
            seed: 8,
            ..TripConfig::default()
        };
        let dense = gen_trips(&net, &truth, &cfg).unwrap();
        let clean = sparsify(&net, &dense[0], 1.0, FixPlacement::Nodes).unwrap();
        let mut noisy = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        jitter_fixes(&mut noisy, 0.0, &mut rng).unwrap();
        assert_eq!(noisy, clean);
        jitter_fixes(&mut noisy, 10.0, &mut rng).unwrap();
        for (a, b) in clean.fixes.iter().zip(&noisy.fixes) {
            assert_eq!(a.ts, b.ts);
            let d = crate::netgraph::haversine_m(a.lon, a.lat, b.lon, b.lat);
            assert!(d > 0.0 && d < 60.0, "moved {d} m");
        }
        assert!(jitter_fixes(&mut noisy, -1.0, &mut rng).is_err());
    }

    #[test]
    fn trips_are_seed_deterministic() {
        let net = grid(5, 5);
        let truth = gen_ground_truth(&net, &CongestionProfile::default(), 5);
        let cfg = TripConfig {
            trips: 30,
            min_hops: 3,
            seed: 4,
            ..TripConfig::default()
        };
        assert_eq!(gen_trips(&net, &truth, &cfg).unwrap(), gen_trips(&net, &truth, &cfg).unwrap());
    }
}
