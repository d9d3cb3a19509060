//! Journey logs, MDP triples and fixed-length fused training sequences.

mod io;
mod reward;
mod sequence;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    journeys_from_records, parse_journey_log, parse_profiles, read_journeys, write_journey_log,
    write_profiles, LogRecord, ParseStats, ProfileRecord, MAX_MALFORMED_FRACTION,
};
pub use reward::{compute_reward, Reward, RewardMode, RewardSpec, DEFAULT_PENALTY_STRENGTH};
pub use sequence::{build_sequences, query_sample, SequenceConfig, SequenceSample, DEFAULT_MIN_JOURNEY_LEN};
pub use split::{prepare_dataset, split_dataset, DatasetSplit, PreparedData, SplitPart};

/// One ad exposure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub channel: usize,
    pub touch_features: Vec<f64>,
    pub gain: f64,
    pub cost: f64,
    pub timestamp: i64,
    /// Per-class gains (e.g. clicks, conversions) for fusion rewards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Vec<f64>>,
}

impl Observation {
    pub fn new(channel: usize, touch_features: Vec<f64>, gain: f64, cost: f64, timestamp: i64) -> Self {
        Self {
            channel,
            touch_features,
            gain,
            cost,
            timestamp,
            gains: None,
        }
    }
}

/// A user's chronological exposures plus static profile features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Journey {
    pub user_id: String,
    pub static_features: Vec<f64>,
    pub observations: Vec<Observation>,
}

impl Journey {
    /// Checks the journey against a channel count and its own ordering invariants.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::Data(format!("journey {} is empty", self.user_id)));
        }
        let mut last_ts = i64::MIN;
        for (i, obs) in self.observations.iter().enumerate() {
            if obs.channel >= channels {
                return Err(Error::Data(format!(
                    "journey {}: observation {i} has channel {} but only {channels} channels exist",
                    self.user_id, obs.channel
                )));
            }
            if !(obs.cost >= 0.0) || !obs.gain.is_finite() {
                return Err(Error::Data(format!(
                    "journey {}: observation {i} has invalid gain/cost",
                    self.user_id
                )));
            }
            if obs.timestamp < last_ts {
                return Err(Error::Data(format!(
                    "journey {}: timestamps not chronological at {i}",
                    self.user_id
                )));
            }
            last_ts = obs.timestamp;
        }
        Ok(())
    }
}

/// `s_t = concat(q_t, f)`.
pub fn build_state(
    obs: &Observation,
    profile: &[f64],
    touch_dim: usize,
    static_dim: usize,
    journey: &str,
) -> Result<Vec<f64>> {
    if obs.touch_features.len() != touch_dim || profile.len() != static_dim {
        return Err(Error::Data(format!(
            "journey {journey}: expected {touch_dim} touch and {static_dim} static features, got {} and {}",
            obs.touch_features.len(),
            profile.len()
        )));
    }
    let mut state = Vec::with_capacity(touch_dim + static_dim);
    state.extend_from_slice(&obs.touch_features);
    state.extend_from_slice(profile);
    Ok(state)
}

pub fn encode_action(channel: usize, channels: usize) -> Result<Vec<f64>> {
    if channel >= channels {
        return Err(Error::Data(format!(
            "channel {channel} out of range for {channels} channels"
        )));
    }
    let mut v = vec![0.0; channels];
    v[channel] = 1.0;
    Ok(v)
}
