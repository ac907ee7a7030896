use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::netgraph::{RoadNetwork, SegmentId};

/// Half-hour slots per day.
pub const TIME_STEPS: usize = 48;
/// Length of one time step in seconds.
pub const STEP_SECONDS: f64 = 1800.0;

/// Time step of a unix timestamp (UTC time of day).
pub fn time_step_of(unix_ts: f64) -> usize {
    let tod = unix_ts.rem_euclid(86_400.0);
    ((tod / STEP_SECONDS).floor() as usize).min(TIME_STEPS - 1)
}

/// Day of week of a unix timestamp, Monday = 0.
pub fn day_of_week_of(unix_ts: f64) -> usize {
    let days = (unix_ts / 86_400.0).floor() as i64;
    // 1970-01-01 was a Thursday.
    (days + 3).rem_euclid(7) as usize
}

/// Per-segment, per-time-step travel-time mean and standard deviation in
/// seconds, rows indexed by segment id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelTimeTable {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    /// Identifies the parameter snapshot that produced the table.
    pub producing_params: u64,
}

impl TravelTimeTable {
    /// Free-flow table: `mu = length / limit` and a constant `sigma`.
    pub fn free_flow(net: &RoadNetwork, sigma: f64) -> Self {
        let base = net.base_times();
        let mu = Array2::from_shape_fn((base.len(), TIME_STEPS), |(i, _)| base[i]);
        let sigma = Array2::from_elem((base.len(), TIME_STEPS), sigma);
        TravelTimeTable {
            mu,
            sigma,
            producing_params: 0,
        }
    }

    pub fn num_segments(&self) -> usize {
        self.mu.nrows()
    }

    #[inline]
    pub fn mu(&self, seg: SegmentId, time_step: usize) -> f64 {
        self.mu[[seg.index(), time_step]]
    }

    #[inline]
    pub fn sigma(&self, seg: SegmentId, time_step: usize) -> f64 {
        self.sigma[[seg.index(), time_step]]
    }

    /// Column of means at one time step, usable as routing weights.
    pub fn mu_column(&self, time_step: usize) -> Vec<f64> {
        self.mu.column(time_step).to_vec()
    }

    /// Largest absolute elementwise difference of the two mean tables.
    pub fn max_mu_change(&self, other: &TravelTimeTable) -> f64 {
        self.mu
            .iter()
            .zip(other.mu.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calendar_helpers() {
        // 2018-10-01 00:00:00 UTC, a Monday.
        let monday = 1_538_352_000.0;
        assert_eq!(day_of_week_of(monday), 0);
        assert_eq!(day_of_week_of(monday + 6.5 * 86_400.0), 6);
        assert_eq!(time_step_of(monday), 0);
        assert_eq!(time_step_of(monday + 8.0 * 3600.0), 16);
        assert_eq!(time_step_of(monday + 17.5 * 3600.0 - 0.001), 34);
        assert_eq!(time_step_of(monday + 86_399.9), 47);
    }
}
