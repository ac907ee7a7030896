//! Error metrics, route-recovery accuracy and road-condition maps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::emtrain::PairSample;
use crate::netgraph::{RoadNetwork, SegmentId};
use crate::pathing::Route;
use crate::stmodel::{time_step_of, TravelTimeTable, STEP_SECONDS};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction and truth lengths differ ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no samples to evaluate")]
    Empty,
}

/// Travel-time errors in minutes (RMSE, MAE) and percent (MAPE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TteReport {
    pub rmse_min: f64,
    pub mae_min: f64,
    pub mape_pct: f64,
    pub n: usize,
    /// Per sampling-interval rows, keyed by label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub breakdown: BTreeMap<String, TteReport>,
}

pub fn tte_metrics(pred_seconds: &[f64], true_seconds: &[f64]) -> Result<TteReport, EvalError> {
    if pred_seconds.len() != true_seconds.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred_seconds.len(),
            truth: true_seconds.len(),
        });
    }
    if pred_seconds.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = pred_seconds.len() as f64;
    let pairs = || pred_seconds.iter().zip(true_seconds);
    let mse = pairs().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let mae = pairs().map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let (ape, positive) = pairs()
        .filter(|(_, &t)| t > 0.0)
        .fold((0.0, 0usize), |(s, k), (p, t)| (s + (p - t).abs() / t, k + 1));
    Ok(TteReport {
        rmse_min: mse.sqrt() / 60.0,
        mae_min: mae / 60.0,
        mape_pct: if positive == 0 { 0.0 } else { 100.0 * ape / positive as f64 },
        n: pred_seconds.len(),
        breakdown: BTreeMap::new(),
    })
}

/// Length-weighted overlap of two routes over directed segment ids.
pub fn route_accuracy(net: &RoadNetwork, truth: &Route, inferred: &Route) -> f64 {
    route_accuracy_with(net, &truth.segment_ids, &inferred.segment_ids, false)
}

/// `|truth ∩ inferred| / max(|truth|, |inferred|)` in meters. With
/// `undirected`, a segment and its reverse twin count as the same road.
pub fn route_accuracy_with(net: &RoadNetwork, truth: &[SegmentId], inferred: &[SegmentId], undirected: bool) -> f64 {
    if truth.is_empty() && inferred.is_empty() {
        return 1.0;
    }
    if truth.is_empty() || inferred.is_empty() {
        return 0.0;
    }
    let key = |s: SegmentId| match (undirected, net.segment(s).twin) {
        (true, Some(t)) => s.min(t),
        _ => s,
    };
    let length = |ids: &BTreeSet<SegmentId>| ids.iter().map(|&s| net.segment(s).length_m).sum::<f64>();
    let a: BTreeSet<SegmentId> = truth.iter().map(|&s| key(s)).collect();
    let b: BTreeSet<SegmentId> = inferred.iter().map(|&s| key(s)).collect();
    let common: BTreeSet<SegmentId> = a.intersection(&b).copied().collect();
    let denom = length(&a).max(length(&b));
    if denom == 0.0 {
        return if common.len() == a.len().max(b.len()) { 1.0 } else { 0.0 };
    }
    length(&common) / denom
}

/// First time step of the daily evaluation window (06:00).
pub const WINDOW_START_STEP: usize = 12;
/// Half-hour bins in the 06:00-22:00 window.
pub const WINDOW_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteBin {
    /// Start of the bin, `HH:MM`.
    pub start: String,
    pub n: usize,
    pub mean_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteReport {
    pub mean_accuracy: f64,
    pub n: usize,
    pub bins: Vec<RouteBin>,
}

fn clock_label(step: usize) -> String {
    let minutes = step * (STEP_SECONDS as usize / 60);
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

/// Mean accuracy overall and per half-hour departure bin. Samples are
/// `(departure unix time, accuracy)`; departures outside the window count
/// toward the mean only.
pub fn route_report(samples: &[(f64, f64)]) -> RouteReport {
    let mut sums = vec![(0.0, 0usize); WINDOW_BINS];
    for &(ts, acc) in samples {
        let step = time_step_of(ts);
        if (WINDOW_START_STEP..WINDOW_START_STEP + WINDOW_BINS).contains(&step) {
            let b = &mut sums[step - WINDOW_START_STEP];
            b.0 += acc;
            b.1 += 1;
        }
    }
    let n = samples.len();
    RouteReport {
        mean_accuracy: if n == 0 {
            0.0
        } else {
            samples.iter().map(|s| s.1).sum::<f64>() / n as f64
        },
        n,
        bins: sums
            .into_iter()
            .enumerate()
            .map(|(i, (s, k))| RouteBin {
                start: clock_label(WINDOW_START_STEP + i),
                n: k,
                mean_accuracy: (k > 0).then(|| s / k as f64),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedState {
    VeryCongested,
    Congested,
    Slow,
    Unblocked,
}

impl SpeedState {
    pub const ALL: [SpeedState; 4] = [
        SpeedState::VeryCongested,
        SpeedState::Congested,
        SpeedState::Slow,
        SpeedState::Unblocked,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SpeedState::VeryCongested => "very_congested",
            SpeedState::Congested => "congested",
            SpeedState::Slow => "slow",
            SpeedState::Unblocked => "unblocked",
        }
    }
}

/// Quarter of the speed limit the speed falls in, right-open.
pub fn classify_speed_state(speed_kph: f64, limit_kph: f64) -> SpeedState {
    // Compare against exact quarter thresholds so boundaries land in the upper bin.
    let q = (1..4).take_while(|&k| speed_kph >= limit_kph * (k as f64 / 4.0)).count();
    SpeedState::ALL[q]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCondition {
    pub segment: SegmentId,
    pub speed_kph: f64,
    pub state: SpeedState,
    pub no_data: bool,
}

/// Segments on at least one assigned training route.
pub fn observed_segments(pairs: &[PairSample], num_segments: usize) -> Vec<bool> {
    let mut seen = vec![false; num_segments];
    for p in pairs {
        for s in &p.assigned().segment_ids {
            seen[s.index()] = true;
        }
    }
    seen
}

/// Speed state of every segment at one time step. Segments without data
/// are reported unblocked and flagged.
pub fn condition_map(
    table: &TravelTimeTable,
    net: &RoadNetwork,
    time_step: usize,
    observed: Option<&[bool]>,
) -> Vec<SegmentCondition> {
    net.segments()
        .iter()
        .map(|seg| {
            let speed_kph = 3.6 * seg.length_m / table.mu(seg.id, time_step);
            let no_data = observed.is_some_and(|o| !o[seg.id.index()]);
            SegmentCondition {
                segment: seg.id,
                speed_kph,
                state: if no_data {
                    SpeedState::Unblocked
                } else {
                    classify_speed_state(speed_kph, seg.speed_limit_kph)
                },
                no_data,
            }
        })
        .collect()
}

/// GeoJSON `FeatureCollection` of segment lines carrying their state.
pub fn conditions_geojson(net: &RoadNetwork, time_step: usize, conditions: &[SegmentCondition]) -> Value {
    let features: Vec<Value> = conditions
        .iter()
        .map(|c| {
            let seg = net.segment(c.segment);
            let (a, b) = (net.node(seg.from), net.node(seg.to));
            json!({
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": [[a.lon, a.lat], [b.lon, b.lat]],
                },
                "properties": {
                    "segment": c.segment.0,
                    "road": seg.road_id.to_string(),
                    "class": seg.road_class.as_str(),
                    "time_step": time_step,
                    "speed_kph": c.speed_kph,
                    "limit_kph": seg.speed_limit_kph,
                    "state": c.state.as_str(),
                    "no_data": c.no_data,
                },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

/// Mean absolute percentage error of learned against true means over the
/// `(segment, time step)` cells with at least `min_count` traversals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuRecovery {
    pub mape_pct: f64,
    pub cells: usize,
}

pub fn mu_recovery(table: &TravelTimeTable, true_mu: &Array2<f64>, counts: &Array2<u32>, min_count: u32) -> MuRecovery {
    let (mut sum, mut cells) = (0.0, 0usize);
    for ((idx, &c), &t) in counts.indexed_iter().zip(true_mu.iter()) {
        if c >= min_count {
            sum += (table.mu[idx] - t).abs() / t;
            cells += 1;
        }
    }
    MuRecovery {
        mape_pct: if cells == 0 { 0.0 } else { 100.0 * sum / cells as f64 },
        cells,
    }
}

/// Long-format CSV, one row per `(metric, sampling_interval, time_bin)`;
/// `time_bin` is `all` for whole-day values.
pub fn reports_csv(rows: &[(String, &TteReport, Option<&RouteReport>)]) -> String {
    let mut out = String::from("metric,sampling_interval,time_bin,value\n");
    let mut line = |metric: &str, label: &str, bin: &str, value: f64| {
        writeln!(out, "{metric},{label},{bin},{value}").expect("string write");
    };
    for (label, tte, route) in rows {
        line("rmse_min", label, "all", tte.rmse_min);
        line("mae_min", label, "all", tte.mae_min);
        line("mape_pct", label, "all", tte.mape_pct);
        line("n_trajectories", label, "all", tte.n as f64);
        if let Some(r) = route {
            line("route_accuracy", label, "all", r.mean_accuracy);
            for b in &r.bins {
                if let Some(a) = b.mean_accuracy {
                    line("route_accuracy", label, &b.start, a);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{NetworkFile, NodeRecord, SegmentRecord};

    fn net(lengths: &[f64]) -> RoadNetwork {
        let n = lengths.len() as u64 + 1;
        RoadNetwork::from_records(&NetworkFile {
            nodes: (0..n)
                .map(|i| NodeRecord {
                    id: i.into(),
                    lon: 0.01 * i as f64,
                    lat: 0.0,
                })
                .collect(),
            segments: lengths
                .iter()
                .enumerate()
                .map(|(i, &len)| SegmentRecord {
                    id: (i as u64).into(),
                    from: (i as u64).into(),
                    to: (i as u64 + 1).into(),
                    length_m: len,
                    class: "primary".into(),
                    lanes: 2,
                    oneway: false,
                    speed_limit_kph: 60.0,
                })
                .collect(),
        })
        .unwrap()
    }

    fn ids(v: &[u32]) -> Vec<SegmentId> {
        v.iter().map(|&i| SegmentId(i)).collect()
    }

    #[test]
    fn tte_examples() {
        let r = tte_metrics(&[60.0, 90.0], &[60.0, 90.0]).unwrap();
        assert_eq!((r.rmse_min, r.mae_min, r.mape_pct), (0.0, 0.0, 0.0));
        let r = tte_metrics(&[120.0], &[60.0]).unwrap();
        assert_eq!((r.rmse_min, r.mae_min, r.mape_pct), (1.0, 1.0, 100.0));
        let r = tte_metrics(&[60.0, 180.0], &[60.0, 120.0]).unwrap();
        assert!((r.rmse_min - 1800f64.sqrt() / 60.0).abs() < 1e-12);
        #[allow(clippy::approx_constant)]
        let quoted = 0.7071;
        assert!((r.rmse_min - quoted).abs() < 1e-4);
        assert_eq!(r.mae_min, 0.5);
        assert_eq!(r.mape_pct, 25.0);
        assert_eq!(
            tte_metrics(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch { pred: 1, truth: 2 })
        );
        assert_eq!(tte_metrics(&[], &[]), Err(EvalError::Empty));
    }

    #[test]
    fn accuracy_examples() {
        // two-way segments: ids 0/1, 2/3, 4/5, 6/7 are forward/reverse
        let g = net(&[600.0, 400.0, 200.0, 150.0]);
        let truth = ids(&[0, 2]);
        let inferred = ids(&[0, 4]);
        assert_eq!(route_accuracy_with(&g, &truth, &inferred, false), 0.6);
        assert_eq!(route_accuracy_with(&g, &truth, &truth, false), 1.0);
        assert_eq!(route_accuracy_with(&g, &truth, &ids(&[4, 6]), false), 0.0);
        assert_eq!(route_accuracy_with(&g, &[], &[], false), 1.0);
        assert_eq!(route_accuracy_with(&g, &truth, &[], false), 0.0);
        assert_eq!(route_accuracy_with(&g, &[], &truth, false), 0.0);
        // reversed traversal counts only when undirected
        assert_eq!(route_accuracy_with(&g, &ids(&[0]), &ids(&[1]), false), 0.0);
        assert_eq!(route_accuracy_with(&g, &ids(&[0]), &ids(&[1]), true), 1.0);
    }

    #[test]
    fn speed_state_bins() {
        use SpeedState::*;
        assert_eq!(classify_speed_state(20.0, 60.0), Congested);
        assert_eq!(classify_speed_state(50.0, 60.0), Unblocked);
        assert_eq!(classify_speed_state(0.0, 60.0), VeryCongested);
        assert_eq!(classify_speed_state(14.999, 60.0), VeryCongested);
        assert_eq!(classify_speed_state(15.0, 60.0), Congested);
        assert_eq!(classify_speed_state(30.0, 60.0), Slow);
        assert_eq!(classify_speed_state(45.0, 60.0), Unblocked);
        assert_eq!(classify_speed_state(90.0, 60.0), Unblocked);
    }

    #[test]
    fn condition_map_examples() {
        let g = net(&[500.0, 250.0]);
        let mut table = TravelTimeTable::free_flow(&g, 1.0);
        let map = condition_map(&table, &g, 10, None);
        assert!(map.iter().all(|c| c.state == SpeedState::Unblocked && !c.no_data));
        table.mu.column_mut(10).mapv_inplace(|m| 4.0 * m);
        let map = condition_map(&table, &g, 10, None);
        assert!(map.iter().all(|c| (c.speed_kph - 15.0).abs() < 1e-9));
        assert!(map.iter().all(|c| c.state == SpeedState::Congested));
        let seen = [true, false, false, false];
        let map = condition_map(&table, &g, 10, Some(&seen));
        assert_eq!(map[0].state, SpeedState::Congested);
        assert!(map[1].no_data && map[1].state == SpeedState::Unblocked);
        let gj = conditions_geojson(&g, 10, &map);
        assert_eq!(gj["features"].as_array().unwrap().len(), 4);
        assert_eq!(gj["features"][1]["properties"]["no_data"], true);
    }

    #[test]
    fn route_report_bins() {
        let day = 1_538_524_800.0;
        let r = route_report(&[(day + 6.0 * 3600.0, 1.0), (day + 6.4 * 3600.0, 0.5), (day + 3600.0, 0.0)]);
        assert_eq!(r.n, 3);
        assert_eq!(r.mean_accuracy, 0.5);
        assert_eq!(r.bins.len(), 32);
        assert_eq!(r.bins[0].start, "06:00");
        assert_eq!(r.bins[0].mean_accuracy, Some(0.75));
        assert_eq!(r.bins[31].start, "21:30");
        assert_eq!(r.bins[1].mean_accuracy, None);
    }
}
