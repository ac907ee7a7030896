use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{stable_softplus, Bag, SparseRows, Tape, Var};
use super::table::{TravelTimeTable, TIME_STEPS};
use super::{ModelError, TemporalContext, DAYS};
use crate::netgraph::{
    build_relational_adjacency, RelationalAdjacency, RoadClass, RoadNetwork, RoadSegment, SegmentId,
};

pub const CLASS_DIM: usize = 8;
pub const LANES_DIM: usize = 4;
pub const ONEWAY_DIM: usize = 2;
pub const FEATURE_DIM: usize = CLASS_DIM + LANES_DIM + ONEWAY_DIM;
pub const LANE_BUCKETS: usize = 4;
pub const WEATHER_DIM: usize = 8;
pub const HOLIDAY_DIM: usize = 4;
pub const TEMPORAL_INPUT_DIM: usize = DAYS + TIME_STEPS + WEATHER_DIM + HOLIDAY_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of every graph layer and of the temporal representation.
    pub hidden: usize,
    pub rgcn_layers: usize,
    pub weather_types: usize,
    pub holiday_types: usize,
    /// Bound on the log-multiplier applied to the free-flow time.
    pub mu_clamp: f64,
    pub sigma_min: f64,
    pub sigma_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            rgcn_layers: 3,
            weather_types: 6,
            holiday_types: 2,
            mu_clamp: 3.0,
            sigma_min: 1.0,
            sigma_init: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgcnLayerParams {
    pub self_weight: Array2<f64>,
    /// One matrix per relation, in [`RoadClass::ALL`] order.
    pub relation_weights: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Every trainable tensor of the model. Matrices act on row vectors
/// (`x · W`), so weights are shaped `[in × out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub class_emb: Array2<f64>,
    pub lanes_emb: Array2<f64>,
    pub oneway_emb: Array2<f64>,
    pub rgcn: Vec<RgcnLayerParams>,
    pub weather_emb: Array2<f64>,
    pub holiday_emb: Array2<f64>,
    pub temporal_w: Array2<f64>,
    pub temporal_b: Array2<f64>,
    pub mu_head: HeadParams,
    pub sigma_head: HeadParams,
}

/// Inverse of softplus for positive arguments.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

fn embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.5..0.5))
}

impl ModelParams {
    /// Random graph and temporal weights; the output layers of both heads
    /// start at zero so the untrained model predicts the free-flow mean and
    /// `sigma_init` everywhere.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden;
        let rgcn = (0..cfg.rgcn_layers)
            .map(|l| {
                let d_in = if l == 0 { FEATURE_DIM } else { d };
                RgcnLayerParams {
                    self_weight: glorot(&mut rng, d_in, d),
                    relation_weights: (0..RoadClass::COUNT).map(|_| glorot(&mut rng, d_in, d)).collect(),
                }
            })
            .collect();
        let class_emb = embedding(&mut rng, RoadClass::COUNT, CLASS_DIM);
        let lanes_emb = embedding(&mut rng, LANE_BUCKETS, LANES_DIM);
        let oneway_emb = embedding(&mut rng, 2, ONEWAY_DIM);
        let weather_emb = embedding(&mut rng, cfg.weather_types, WEATHER_DIM);
        let holiday_emb = embedding(&mut rng, cfg.holiday_types, HOLIDAY_DIM);
        let temporal_w = glorot(&mut rng, TEMPORAL_INPUT_DIM, d);
        let mut head = |bias: f64| HeadParams {
            w1: glorot(&mut rng, d, d),
            b1: Array2::zeros((1, d)),
            w2: Array2::zeros((d, 1)),
            b2: Array2::from_elem((1, 1), bias),
        };
        let mu_head = head(0.0);
        let sigma_head = head(softplus_inv(cfg.sigma_init - cfg.sigma_min));
        ModelParams {
            class_emb,
            lanes_emb,
            oneway_emb,
            rgcn,
            weather_emb,
            holiday_emb,
            temporal_w,
            temporal_b: Array2::zeros((1, d)),
            mu_head,
            sigma_head,
        }
    }

    /// Tensors in slot order; gradients and optimizer state use the same order.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.class_emb, &self.lanes_emb, &self.oneway_emb];
        for layer in &self.rgcn {
            out.push(&layer.self_weight);
            out.extend(layer.relation_weights.iter());
        }
        out.extend([&self.weather_emb, &self.holiday_emb, &self.temporal_w, &self.temporal_b]);
        for h in [&self.mu_head, &self.sigma_head] {
            out.extend([&h.w1, &h.b1, &h.w2, &h.b2]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.class_emb, &mut self.lanes_emb, &mut self.oneway_emb];
        for layer in &mut self.rgcn {
            out.push(&mut layer.self_weight);
            out.extend(layer.relation_weights.iter_mut());
        }
        out.extend([
            &mut self.weather_emb,
            &mut self.holiday_emb,
            &mut self.temporal_w,
            &mut self.temporal_b,
        ]);
        for h in [&mut self.mu_head, &mut self.sigma_head] {
            out.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2]);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// FNV-1a over the bit patterns of every scalar.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for x in t.iter() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn slots(&self) -> Slots {
        Slots {
            layers: self.rgcn.len(),
        }
    }
}

/// Slot index arithmetic matching [`ModelParams::tensors`].
#[derive(Clone, Copy)]
struct Slots {
    layers: usize,
}

impl Slots {
    const CLASS: usize = 0;
    const LANES: usize = 1;
    const ONEWAY: usize = 2;
    const PER_LAYER: usize = 1 + RoadClass::COUNT;

    fn rgcn_self(self, l: usize) -> usize {
        3 + l * Self::PER_LAYER
    }

    fn rgcn_rel(self, l: usize, r: usize) -> usize {
        self.rgcn_self(l) + 1 + r
    }

    fn after_rgcn(self) -> usize {
        3 + self.layers * Self::PER_LAYER
    }

    fn weather(self) -> usize {
        self.after_rgcn()
    }

    fn holiday(self) -> usize {
        self.after_rgcn() + 1
    }

    fn temporal_w(self) -> usize {
        self.after_rgcn() + 2
    }

    fn temporal_b(self) -> usize {
        self.after_rgcn() + 3
    }

    /// First of the four head tensors; `head` is 0 for the mean, 1 for the std.
    fn head(self, head: usize) -> usize {
        self.after_rgcn() + 4 + 4 * head
    }
}

pub fn lane_bucket(lanes: u32) -> usize {
    (lanes.clamp(1, LANE_BUCKETS as u32) - 1) as usize
}

/// `[class(8) | lanes(4) | oneway(2)]` embedding of one segment.
pub fn embed_segment_features(seg: &RoadSegment, params: &ModelParams) -> Array1<f64> {
    let mut out = Array1::zeros(FEATURE_DIM);
    out.slice_mut(ndarray::s![..CLASS_DIM])
        .assign(&params.class_emb.row(seg.road_class.index()));
    out.slice_mut(ndarray::s![CLASS_DIM..CLASS_DIM + LANES_DIM])
        .assign(&params.lanes_emb.row(lane_bucket(seg.lanes)));
    out.slice_mut(ndarray::s![CLASS_DIM + LANES_DIM..])
        .assign(&params.oneway_emb.row(seg.oneway as usize));
    out
}

/// Per-relation normalized aggregation operators `A_r[i, j] = 1 / c_{i,r}`.
/// Relations with no edges anywhere map to `None`.
pub fn relation_operators(adj: &RelationalAdjacency) -> Vec<Option<Arc<SparseRows>>> {
    let n = adj.num_segments();
    RoadClass::ALL
        .iter()
        .map(|&r| {
            let rows: Vec<Vec<(usize, f64)>> = (0..n)
                .map(|i| {
                    let seg = SegmentId(i as u32);
                    let nb = adj.neighbors(seg, r);
                    let c = adj.norm(seg, r).unwrap_or(1.0);
                    nb.iter().map(|j| (j.index(), 1.0 / c)).collect()
                })
                .collect();
            let mix = SparseRows { cols: n, rows };
            (!mix.is_empty()).then(|| Arc::new(mix))
        })
        .collect()
}

fn record_rgcn(
    tape: &mut Tape,
    vars: &[Var],
    slots: Slots,
    h0: Var,
    relations: &[Option<Arc<SparseRows>>],
) -> Var {
    let mut h = h0;
    for l in 0..slots.layers {
        let mut out = tape.matmul(h, vars[slots.rgcn_self(l)]);
        for (r, mix) in relations.iter().enumerate() {
            if let Some(mix) = mix {
                let msg = tape.sparse(h, Arc::clone(mix));
                let term = tape.matmul(msg, vars[slots.rgcn_rel(l, r)]);
                out = tape.add(out, term);
            }
        }
        h = if l + 1 < slots.layers { tape.relu(out) } else { out };
    }
    h
}

fn record_temporal(tape: &mut Tape, vars: &[Var], slots: Slots, contexts: &[TemporalContext]) -> Var {
    let mut onehot = Array2::zeros((contexts.len(), DAYS + TIME_STEPS));
    for (i, c) in contexts.iter().enumerate() {
        onehot[[i, c.day_of_week]] = 1.0;
        onehot[[i, DAYS + c.time_step]] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let weather = tape.gather_rows(
        vars[slots.weather()],
        Arc::new(contexts.iter().map(|c| c.weather_id).collect()),
    );
    let holiday = tape.gather_rows(
        vars[slots.holiday()],
        Arc::new(contexts.iter().map(|c| c.holiday_id).collect()),
    );
    let x = tape.concat_cols(&[onehot, weather, holiday]);
    let z = tape.matmul(x, vars[slots.temporal_w()]);
    let z = tape.add_row(z, vars[slots.temporal_b()]);
    tape.relu(z)
}

fn record_head(tape: &mut Tape, vars: &[Var], first: usize, fused: Var) -> Var {
    let a = tape.matmul(fused, vars[first]);
    let a = tape.add_row(a, vars[first + 1]);
    let a = tape.relu(a);
    let o = tape.matmul(a, vars[first + 2]);
    tape.add_row(o, vars[first + 3])
}

/// One weak label ready for the loss: a route's segments, the context of
/// its departure, and the observed total time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem<'a> {
    pub segments: &'a [SegmentId],
    pub context: TemporalContext,
    pub observed: f64,
}

/// Network-bound part of the model: static features and graph operators.
#[derive(Debug, Clone)]
pub struct SpatioTemporalModel {
    pub config: ModelConfig,
    class_idx: Arc<Vec<usize>>,
    lanes_idx: Arc<Vec<usize>>,
    oneway_idx: Arc<Vec<usize>>,
    relations: Vec<Option<Arc<SparseRows>>>,
    base_time: Vec<f64>,
}

/// Query result: per-row mean and std columns on the tape.
struct Heads {
    mu: Var,
    sigma: Var,
}

impl SpatioTemporalModel {
    pub fn new(net: &RoadNetwork, config: ModelConfig) -> Self {
        let adj = build_relational_adjacency(net);
        let segs = net.segments();
        SpatioTemporalModel {
            config,
            class_idx: Arc::new(segs.iter().map(|s| s.road_class.index()).collect()),
            lanes_idx: Arc::new(segs.iter().map(|s| lane_bucket(s.lanes)).collect()),
            oneway_idx: Arc::new(segs.iter().map(|s| s.oneway as usize).collect()),
            relations: relation_operators(&adj),
            base_time: net.base_times(),
        }
    }

    pub fn num_segments(&self) -> usize {
        self.base_time.len()
    }

    pub fn base_times(&self) -> &[f64] {
        &self.base_time
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.config, seed)
    }

    pub fn check_context(&self, ctx: &TemporalContext) -> Result<(), ModelError> {
        ctx.validate(self.config.weather_types, self.config.holiday_types)
    }

    fn register(tape: &mut Tape, params: &ModelParams) -> Vec<Var> {
        params
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(slot, t)| tape.param(slot, t.clone()))
            .collect()
    }

    /// Records the model for the given `(segment, context)` rows.
    fn record(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        slots: Slots,
        rows: &[(usize, usize)],
        contexts: &[TemporalContext],
    ) -> Heads {
        let class = tape.gather_rows(vars[Slots::CLASS], Arc::clone(&self.class_idx));
        let lanes = tape.gather_rows(vars[Slots::LANES], Arc::clone(&self.lanes_idx));
        let oneway = tape.gather_rows(vars[Slots::ONEWAY], Arc::clone(&self.oneway_idx));
        let h0 = tape.concat_cols(&[class, lanes, oneway]);
        let spatial = record_rgcn(tape, vars, slots, h0, &self.relations);
        let temporal = record_temporal(tape, vars, slots, contexts);

        let sv = tape.gather_rows(spatial, Arc::new(rows.iter().map(|r| r.0).collect()));
        let st = tape.gather_rows(temporal, Arc::new(rows.iter().map(|r| r.1).collect()));
        let fused = tape.add(sv, st);

        let c = self.config.mu_clamp;
        let mu_raw = record_head(tape, vars, slots.head(0), fused);
        let mu_log = tape.clamp(mu_raw, -c, c);
        let mu_mult = tape.exp(mu_log);
        let base = Arc::new(rows.iter().map(|r| self.base_time[r.0]).collect());
        let mu = tape.scale_rows(mu_mult, base);

        let sigma_raw = record_head(tape, vars, slots.head(1), fused);
        let sigma_sp = tape.softplus(sigma_raw);
        let sigma = tape.add_scalar(sigma_sp, self.config.sigma_min);
        Heads { mu, sigma }
    }

    fn record_loss(&self, tape: &mut Tape, params: &ModelParams, items: &[TrainItem<'_>]) -> Var {
        let slots = params.slots();
        let vars = Self::register(tape, params);
        let mut contexts: Vec<TemporalContext> = Vec::new();
        let mut ctx_index: HashMap<TemporalContext, usize> = HashMap::new();
        let mut rows: Vec<(usize, usize)> = Vec::new();
        let mut row_index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut bags = Vec::with_capacity(items.len());
        for item in items {
            let c = *ctx_index.entry(item.context).or_insert_with(|| {
                contexts.push(item.context);
                contexts.len() - 1
            });
            let bag_rows = item
                .segments
                .iter()
                .map(|s| {
                    *row_index.entry((s.index(), c)).or_insert_with(|| {
                        rows.push((s.index(), c));
                        rows.len() - 1
                    })
                })
                .collect();
            bags.push(Bag {
                rows: bag_rows,
                observed: item.observed,
            });
        }
        if contexts.is_empty() {
            contexts.push(TemporalContext::default());
        }
        let heads = self.record(tape, &vars, slots, &rows, &contexts);
        tape.bag_nll(heads.mu, heads.sigma, Arc::new(bags))
    }

    /// Mean aggregate NLL over `items`.
    pub fn loss(&self, params: &ModelParams, items: &[TrainItem<'_>]) -> f64 {
        if items.is_empty() {
            return 0.0;
        }
        let mut tape = Tape::new();
        let out = self.record_loss(&mut tape, params, items);
        tape.scalar(out)
    }

    /// Activation pattern of the loss graph (see [`Tape::activation_pattern`]).
    /// The loss is smooth between parameter values that share a pattern.
    pub fn activation_pattern(&self, params: &ModelParams, items: &[TrainItem<'_>]) -> Vec<i8> {
        if items.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        self.record_loss(&mut tape, params, items);
        tape.activation_pattern()
    }

    /// Mean aggregate NLL over `items` and its gradient, shaped like `params`.
    pub fn loss_and_grad(&self, params: &ModelParams, items: &[TrainItem<'_>]) -> (f64, ModelParams) {
        let mut grads = params.zeros_like();
        if items.is_empty() {
            return (0.0, grads);
        }
        let mut tape = Tape::new();
        let out = self.record_loss(&mut tape, params, items);
        let loss = tape.scalar(out);
        let slot_grads = tape.backward(out).expect("fresh tape with scalar output");
        let mut targets = grads.tensors_mut();
        for (slot, g) in slot_grads {
            *targets[slot] += &g;
        }
        (loss, grads)
    }

    /// Spatial representation of every segment, `[segments × hidden]`.
    pub fn spatial(&self, params: &ModelParams) -> Array2<f64> {
        let slots = params.slots();
        let mut tape = Tape::new();
        let vars = Self::register(&mut tape, params);
        let class = tape.gather_rows(vars[Slots::CLASS], Arc::clone(&self.class_idx));
        let lanes = tape.gather_rows(vars[Slots::LANES], Arc::clone(&self.lanes_idx));
        let oneway = tape.gather_rows(vars[Slots::ONEWAY], Arc::clone(&self.oneway_idx));
        let h0 = tape.concat_cols(&[class, lanes, oneway]);
        let out = record_rgcn(&mut tape, &vars, slots, h0, &self.relations);
        tape.value(out).clone()
    }

    /// Evaluates mean and std for arbitrary `(segment, context)` rows.
    pub fn predict_rows(
        &self,
        params: &ModelParams,
        rows: &[(usize, usize)],
        contexts: &[TemporalContext],
    ) -> (Vec<f64>, Vec<f64>) {
        let slots = params.slots();
        let mut tape = Tape::new();
        let vars = Self::register(&mut tape, params);
        let heads = self.record(&mut tape, &vars, slots, rows, contexts);
        (
            tape.value(heads.mu).column(0).to_vec(),
            tape.value(heads.sigma).column(0).to_vec(),
        )
    }

    /// Table over every segment and time step; day, weather and holiday are
    /// taken from `reference`.
    pub fn materialize(&self, params: &ModelParams, reference: &TemporalContext) -> TravelTimeTable {
        let n = self.num_segments();
        let contexts: Vec<TemporalContext> = (0..TIME_STEPS)
            .map(|ts| TemporalContext {
                time_step: ts,
                ..*reference
            })
            .collect();
        let rows: Vec<(usize, usize)> = (0..n)
            .flat_map(|s| (0..TIME_STEPS).map(move |ts| (s, ts)))
            .collect();
        let (mu, sigma) = self.predict_rows(params, &rows, &contexts);
        TravelTimeTable {
            mu: Array2::from_shape_vec((n, TIME_STEPS), mu).expect("row-major table"),
            sigma: Array2::from_shape_vec((n, TIME_STEPS), sigma).expect("row-major table"),
            producing_params: params.fingerprint(),
        }
    }
}

/// Graph layers applied to explicit input features `h0` (`[segments × 14]`).
pub fn rgcn_forward(adj: &RelationalAdjacency, h0: &Array2<f64>, params: &ModelParams) -> Array2<f64> {
    let relations = relation_operators(adj);
    let slots = params.slots();
    let mut tape = Tape::new();
    let vars = SpatioTemporalModel::register(&mut tape, params);
    let h = tape.constant(h0.clone());
    let out = record_rgcn(&mut tape, &vars, slots, h, &relations);
    tape.value(out).clone()
}

/// Temporal representation of one context.
pub fn temporal_embed(ctx: &TemporalContext, params: &ModelParams) -> Array1<f64> {
    let slots = params.slots();
    let mut tape = Tape::new();
    let vars = SpatioTemporalModel::register(&mut tape, params);
    let out = record_temporal(&mut tape, &vars, slots, std::slice::from_ref(ctx));
    tape.value(out).row(0).to_owned()
}

fn head_forward(h: &HeadParams, fused: &Array1<f64>) -> f64 {
    let a = (fused.dot(&h.w1) + h.b1.row(0)).mapv(|x| x.max(0.0));
    a.dot(&h.w2.column(0)) + h.b2[[0, 0]]
}

/// Mean and std for one segment from its spatial row and a temporal vector.
pub fn predict_params(
    spatial_row: &Array1<f64>,
    temporal: &Array1<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    base_time: f64,
) -> (f64, f64) {
    let fused = spatial_row + temporal;
    let mu = base_time * head_forward(&params.mu_head, &fused).clamp(-cfg.mu_clamp, cfg.mu_clamp).exp();
    let sigma = cfg.sigma_min + stable_softplus(head_forward(&params.sigma_head, &fused));
    (mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{NetworkFile, NodeRecord, SegmentRecord};
    use ndarray::array;

    fn tiny_net() -> RoadNetwork {
        let node = |i: u64| NodeRecord {
            id: i.into(),
            lon: 0.001 * i as f64,
            lat: 0.0,
        };
        let seg = |id: u64, a: u64, b: u64, class: &str, lanes: u32, oneway: bool| SegmentRecord {
            id: id.into(),
            from: a.into(),
            to: b.into(),
            length_m: 100.0 * (id + 1) as f64,
            class: class.into(),
            lanes,
            oneway,
            speed_limit_kph: 36.0,
        };
        RoadNetwork::from_records(&NetworkFile {
            nodes: (0..4).map(node).collect(),
            segments: vec![
                seg(0, 0, 1, "primary", 2, true),
                seg(1, 1, 2, "primary", 2, true),
                seg(2, 2, 3, "primary", 2, false),
            ],
        })
        .unwrap()
    }

    #[test]
    fn feature_embedding_structure() {
        let net = tiny_net();
        let params = ModelParams::init(&ModelConfig::default(), 1);
        let (a, b, c) = (net.segment(SegmentId(0)), net.segment(SegmentId(1)), net.segment(SegmentId(2)));
        assert_eq!(embed_segment_features(a, &params), embed_segment_features(b, &params));
        let (ea, ec) = (embed_segment_features(a, &params), embed_segment_features(c, &params));
        assert_eq!(ea.slice(ndarray::s![..12]), ec.slice(ndarray::s![..12]));
        assert_ne!(ea.slice(ndarray::s![12..]), ec.slice(ndarray::s![12..]));
        let zero = params.zeros_like();
        assert!(embed_segment_features(a, &zero).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lane_buckets() {
        assert_eq!(lane_bucket(1), 0);
        assert_eq!(lane_bucket(3), 2);
        assert_eq!(lane_bucket(4), 3);
        assert_eq!(lane_bucket(9), 3);
    }

    fn one_dim_params(layers: usize) -> ModelParams {
        let cfg = ModelConfig {
            hidden: 1,
            rgcn_layers: layers,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 0).zeros_like()
    }

    #[test]
    fn rgcn_matches_hand_computation_on_path() {
        // Path a -> b -> c, all primary: N(a) = {b}, N(b) = {a, c}, N(c) = {b}.
        let net = {
            let node = |i: u64| NodeRecord {
                id: i.into(),
                lon: 0.001 * i as f64,
                lat: 0.0,
            };
            let seg = |id: u64, a: u64, b: u64| SegmentRecord {
                id: id.into(),
                from: a.into(),
                to: b.into(),
                length_m: 100.0,
                class: "primary".into(),
                lanes: 1,
                oneway: true,
                speed_limit_kph: 36.0,
            };
            RoadNetwork::from_records(&NetworkFile {
                nodes: (0..4).map(node).collect(),
                segments: vec![seg(0, 0, 1), seg(1, 1, 2), seg(2, 2, 3)],
            })
            .unwrap()
        };
        let adj = build_relational_adjacency(&net);
        let mut p = one_dim_params(1);
        p.rgcn[0].self_weight[[0, 0]] = 2.0;
        p.rgcn[0].relation_weights[RoadClass::Primary.index()][[0, 0]] = 3.0;
        let mut h0 = Array2::zeros((3, FEATURE_DIM));
        h0[[0, 0]] = 1.0;
        h0[[1, 0]] = 2.0;
        h0[[2, 0]] = 4.0;
        let out = rgcn_forward(&adj, &h0, &p);
        // h_a = 3·2 + 2·1 = 8; h_b = 3·(1 + 4)/2 + 2·2 = 11.5; h_c = 3·2 + 2·4 = 14
        assert_eq!(out, array![[8.0], [11.5], [14.0]]);
    }

    #[test]
    fn rgcn_without_edges_is_self_chain() {
        let net = {
            let file = NetworkFile {
                nodes: (0..4)
                    .map(|i| NodeRecord {
                        id: (i as u64).into(),
                        lon: i as f64,
                        lat: 0.0,
                    })
                    .collect(),
                segments: vec![
                    SegmentRecord {
                        id: 0u64.into(),
                        from: 0u64.into(),
                        to: 1u64.into(),
                        length_m: 1.0,
                        class: "primary".into(),
                        lanes: 1,
                        oneway: true,
                        speed_limit_kph: 10.0,
                    },
                    SegmentRecord {
                        id: 1u64.into(),
                        from: 2u64.into(),
                        to: 3u64.into(),
                        length_m: 1.0,
                        class: "tertiary".into(),
                        lanes: 1,
                        oneway: true,
                        speed_limit_kph: 10.0,
                    },
                ],
            };
            RoadNetwork::from_records(&file).unwrap()
        };
        let adj = build_relational_adjacency(&net);
        let params = ModelParams::init(&ModelConfig::default(), 3);
        let h0 = Array2::from_shape_fn((2, FEATURE_DIM), |(i, j)| (i + j) as f64 * 0.1);
        let out = rgcn_forward(&adj, &h0, &params);
        let mut expect = h0.clone();
        for (l, layer) in params.rgcn.iter().enumerate() {
            expect = expect.dot(&layer.self_weight);
            if l + 1 < params.rgcn.len() {
                expect.mapv_inplace(|x| x.max(0.0));
            }
        }
        assert_eq!(out, expect);
    }

    #[test]
    fn temporal_embedding_properties() {
        let params = ModelParams::init(&ModelConfig::default(), 5);
        let ctx = TemporalContext {
            time_step: 17,
            day_of_week: 2,
            weather_id: 1,
            holiday_id: 0,
        };
        assert_eq!(temporal_embed(&ctx, &params), temporal_embed(&ctx, &params));
        assert_eq!(temporal_embed(&ctx, &params).len(), 32);
        let zero = params.zeros_like();
        assert!(temporal_embed(&ctx, &zero).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn initialization_identity() {
        let net = tiny_net();
        let model = SpatioTemporalModel::new(&net, ModelConfig::default());
        let params = model.init_params(11);
        let table = model.materialize(&params, &TemporalContext::default());
        let base = net.base_times();
        for (i, b) in base.iter().enumerate() {
            for ts in 0..TIME_STEPS {
                assert_eq!(table.mu[[i, ts]], *b);
                assert!((table.sigma[[i, ts]] - 60.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn link_functions() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::init(&cfg, 2);
        let d = cfg.hidden;
        let zero = Array1::zeros(d);
        let (mu, _) = predict_params(&zero, &zero, &params, &cfg, 50.0);
        assert_eq!(mu, 50.0);
        params.mu_head.b2[[0, 0]] = 2f64.ln();
        let (mu, _) = predict_params(&zero, &zero, &params, &cfg, 50.0);
        assert!((mu - 100.0).abs() < 1e-12);
        params.mu_head.b2[[0, 0]] = 10.0;
        let (mu, _) = predict_params(&zero, &zero, &params, &cfg, 50.0);
        assert_eq!(mu, 50.0 * 3f64.exp());
        params.sigma_head.b2[[0, 0]] = -1e6;
        let (_, sigma) = predict_params(&zero, &zero, &params, &cfg, 50.0);
        assert!(sigma >= cfg.sigma_min);
    }

    #[test]
    fn slot_order_covers_all_tensors() {
        let params = ModelParams::init(&ModelConfig::default(), 0);
        let slots = params.slots();
        let t = params.tensors();
        assert_eq!(t.len(), slots.head(1) + 4);
        assert_eq!(t[slots.temporal_w()].dim(), (TEMPORAL_INPUT_DIM, 32));
        assert_eq!(t[slots.rgcn_rel(2, 8)].dim(), (32, 32));
        assert_eq!(t[slots.head(1) + 3][[0, 0]], params.sigma_head.b2[[0, 0]]);
    }
}
