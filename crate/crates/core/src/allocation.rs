//! Channel-level and user-level budget allocation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Journey;
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// A distribution over channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPolicy {
    pub probs: Vec<f64>,
}

impl ChannelPolicy {
    pub fn uniform(m: usize) -> Self {
        Self {
            probs: vec![1.0 / m as f64; m],
        }
    }

    /// Validates nonnegativity and unit sum (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Shape("channel policy needs at least one channel".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Data(format!("invalid channel probabilities {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("channel probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Normalizes nonnegative rates, falling back to uniform when they are all zero.
    fn from_rates(rates: &[f64], what: &str) -> Self {
        let total: f64 = rates.iter().sum();
        if !(total > 0.0) {
            log::warn!("{what}: every channel rate is zero; using a uniform policy");
            return Self::uniform(rates.len());
        }
        Self {
            probs: rates.iter().map(|r| r / total).collect(),
        }
    }
}

/// Per-channel counts behind the explicit and implicit rates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub exposures: Vec<u64>,
    /// Exposures with positive gain.
    pub positives: Vec<u64>,
    /// Exposures whose predicted reward exceeded the threshold.
    pub predicted_positives: Vec<u64>,
}

impl ChannelStats {
    pub fn new(m: usize) -> Self {
        Self {
            exposures: vec![0; m],
            positives: vec![0; m],
            predicted_positives: vec![0; m],
        }
    }

    pub fn channels(&self) -> usize {
        self.exposures.len()
    }

    pub fn record(&mut self, channel: usize, gain: f64) -> Result<()> {
        if channel >= self.channels() {
            return Err(Error::Data(format!("channel {channel} out of range")));
        }
        self.exposures[channel] += 1;
        if gain > 0.0 {
            self.positives[channel] += 1;
        }
        Ok(())
    }

    /// Counts logged exposures and positive-gain exposures per channel.
    pub fn from_journeys(journeys: &[Journey], m: usize) -> Result<Self> {
        let mut stats = Self::new(m);
        for j in journeys {
            for o in &j.observations {
                stats.record(o.channel, o.gain)?;
            }
        }
        Ok(stats)
    }

    /// `positives_j / N_j`, 0 for unexposed channels.
    pub fn ctr(&self) -> Vec<f64> {
        rates(&self.positives, &self.exposures)
    }
}

fn rates(hits: &[u64], totals: &[u64]) -> Vec<f64> {
    hits.iter()
        .zip(totals)
        .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect()
}

/// `p_j = CTR_j / Σ_i CTR_i`.
pub fn explicit_policy(stats: &ChannelStats) -> Result<ChannelPolicy> {
    if stats.exposures.iter().all(|&n| n == 0) {
        return Err(Error::Data("no channel has any exposure".into()));
    }
    if let Some(j) = (0..stats.channels()).find(|&j| stats.positives[j] > stats.exposures[j]) {
        return Err(Error::Data(format!(
            "channel {j} has more positives than exposures"
        )));
    }
    Ok(ChannelPolicy::from_rates(&stats.ctr(), "explicit policy"))
}

/// Thresholded predicted rate per channel, normalized like [`explicit_policy`].
/// `preds[j]` holds the reward predictions of exposures on channel `j`.
pub fn implicit_policy(preds: &[Vec<f64>], tau: f64) -> Result<ChannelPolicy> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau {tau} must be in (0, 1)")));
    }
    if preds.is_empty() {
        return Err(Error::Shape("implicit policy needs at least one channel".into()));
    }
    let hits: Vec<u64> = preds
        .iter()
        .map(|p| p.iter().filter(|&&r| r > tau).count() as u64)
        .collect();
    let totals: Vec<u64> = preds.iter().map(|p| p.len() as u64).collect();
    Ok(ChannelPolicy::from_rates(
        &rates(&hits, &totals),
        "implicit policy",
    ))
}

/// `(1 − α)·P + α·P̂`.
pub fn merge_policies(
    explicit: &ChannelPolicy,
    implicit: &ChannelPolicy,
    alpha: f64,
) -> Result<ChannelPolicy> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} must be in [0, 1]")));
    }
    if explicit.len() != implicit.len() {
        return Err(Error::Shape(format!(
            "policies over {} and {} channels",
            explicit.len(),
            implicit.len()
        )));
    }
    Ok(ChannelPolicy {
        probs: explicit
            .probs
            .iter()
            .zip(&implicit.probs)
            .map(|(p, q)| (1.0 - alpha) * p + alpha * q)
            .collect(),
    })
}

/// How a user's per-step reward predictions become one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregation {
    /// Prediction at the final valid step.
    #[default]
    Last,
    Mean,
}

impl ScoreAggregation {
    pub fn apply(self, preds: &[f64]) -> Option<f64> {
        match self {
            ScoreAggregation::Last => preds.last().copied(),
            ScoreAggregation::Mean if preds.is_empty() => None,
            ScoreAggregation::Mean => Some(preds.iter().sum::<f64>() / preds.len() as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedUser {
    pub user_id: String,
    pub score: f64,
}

pub type UserRanking = Vec<RankedUser>;

/// Top `n` users by score, ties broken by user id.
pub fn rank_users(scores: &BTreeMap<String, f64>, n: usize) -> Result<UserRanking> {
    if n == 0 {
        return Err(Error::Config("top-N must be at least 1".into()));
    }
    let mut ranked: Vec<RankedUser> = scores
        .iter()
        .map(|(u, &s)| RankedUser {
            user_id: u.clone(),
            score: s,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.user_id.cmp(&b.user_id))
    });
    ranked.truncate(n);
    Ok(ranked)
}
