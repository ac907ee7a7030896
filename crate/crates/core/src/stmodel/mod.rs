//! Spatio-temporal travel-time model.
//!
//! Road features pass through relational graph convolutions to give one
//! spatial vector per segment; the departure context (day, half-hour slot,
//! weather, holiday) maps to a temporal vector of the same width. Their sum
//! feeds two small MLP heads that produce the mean and the standard
//! deviation of the segment's travel time in seconds. Training minimizes
//! the aggregate likelihood of observed multi-segment travel times.

pub mod adam;
pub mod loss;
pub mod model;
pub mod table;
pub mod tape;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamState};
pub use loss::{aggregate_moments, aggregate_route, pair_nll, pair_nll_grad};
pub use model::{
    embed_segment_features, predict_params, rgcn_forward, temporal_embed, ModelConfig, ModelParams,
    SpatioTemporalModel, TrainItem,
};
pub use table::{day_of_week_of, time_step_of, TravelTimeTable, STEP_SECONDS, TIME_STEPS};
pub use tape::{Tape, TapeError};

pub const DAYS: usize = 7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("temporal context out of range: {0}")]
    InvalidContext(String),
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(#[from] serde_json::Error),
}

/// Departure context of a travel-time query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TemporalContext {
    pub time_step: usize,
    pub day_of_week: usize,
    pub weather_id: usize,
    pub holiday_id: usize,
}

impl TemporalContext {
    pub fn validate(&self, weather_types: usize, holiday_types: usize) -> Result<(), ModelError> {
        let bad = |what: &str, v: usize, n: usize| {
            Err(ModelError::InvalidContext(format!("{what} = {v}, expected < {n}")))
        };
        if self.time_step >= TIME_STEPS {
            return bad("time_step", self.time_step, TIME_STEPS);
        }
        if self.day_of_week >= DAYS {
            return bad("day_of_week", self.day_of_week, DAYS);
        }
        if self.weather_id >= weather_types {
            return bad("weather_id", self.weather_id, weather_types);
        }
        if self.holiday_id >= holiday_types {
            return bad("holiday_id", self.holiday_id, holiday_types);
        }
        Ok(())
    }

    /// Context of a departure at `unix_ts`.
    pub fn at(unix_ts: f64, weather_id: usize, holiday_id: usize) -> Self {
        TemporalContext {
            time_step: time_step_of(unix_ts),
            day_of_week: day_of_week_of(unix_ts),
            weather_id,
            holiday_id,
        }
    }
}

/// Parameters plus the metadata needed to rebuild and re-evaluate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ModelParams,
}

impl ModelCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_validation() {
        let ok = TemporalContext {
            time_step: 47,
            day_of_week: 6,
            weather_id: 5,
            holiday_id: 1,
        };
        assert!(ok.validate(6, 2).is_ok());
        assert!(TemporalContext { time_step: 48, ..ok }.validate(6, 2).is_err());
        assert!(TemporalContext { weather_id: 6, ..ok }.validate(6, 2).is_err());
        assert!(TemporalContext { day_of_week: 7, ..ok }.validate(6, 2).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let config = ModelConfig {
            hidden: 4,
            ..ModelConfig::default()
        };
        let ck = ModelCheckpoint {
            params: ModelParams::init(&config, 42),
            config,
            seed: 42,
        };
        ck.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.fingerprint(), ck.params.fingerprint());
    }
}
