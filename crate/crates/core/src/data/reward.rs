use serde::{Deserialize, Serialize};

use super::Observation;
use crate::error::{Error, Result};

/// Lagrangian penalty strength `s` in `g − s·w`.
pub const DEFAULT_PENALTY_STRENGTH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Raw 0/1 gain, no cost term.
    Binary,
    /// Min-max normalized penalized gain.
    Continuous,
    /// Weighted sum of gain classes, penalized then min-max normalized.
    Fusion,
    /// Gain category as a one-hot class.
    Onehot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub mode: RewardMode,
    /// Per-gain-class weights, fusion mode only.
    #[serde(default = "default_fusion_weights")]
    pub fusion_weights: Vec<f64>,
    /// Number of gain categories, onehot mode only.
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_penalty")]
    pub penalty_strength: f64,
    #[serde(default)]
    pub norm_min: Option<f64>,
    #[serde(default)]
    pub norm_max: Option<f64>,
}

fn default_fusion_weights() -> Vec<f64> {
    vec![1.0, 10.0]
}

fn default_classes() -> usize {
    2
}

fn default_penalty() -> f64 {
    DEFAULT_PENALTY_STRENGTH
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self::new(RewardMode::Continuous)
    }
}

/// Reward of one exposure: the vector fed back as `r_{t−1}` and the training label.
#[derive(Clone, Debug, PartialEq)]
pub struct Reward {
    pub embedding: Vec<f64>,
    /// Scalar target, or the class index for onehot mode.
    pub label: f64,
    pub clipped: bool,
}

impl RewardSpec {
    pub fn new(mode: RewardMode) -> Self {
        Self {
            mode,
            fusion_weights: default_fusion_weights(),
            num_classes: default_classes(),
            penalty_strength: DEFAULT_PENALTY_STRENGTH,
            norm_min: None,
            norm_max: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_strength >= 0.0) {
            return Err(Error::Config("penalty_strength must be ≥ 0".into()));
        }
        if self.mode == RewardMode::Onehot && self.num_classes < 2 {
            return Err(Error::Config("onehot rewards need at least 2 classes".into()));
        }
        if let (Some(lo), Some(hi)) = (self.norm_min, self.norm_max) {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "norm_min {lo} must be below norm_max {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn needs_normalization(&self) -> bool {
        matches!(self.mode, RewardMode::Continuous | RewardMode::Fusion)
    }

    /// Width of the reward vector inside a fused input column.
    pub fn embedding_dim(&self) -> usize {
        match self.mode {
            RewardMode::Onehot => self.num_classes,
            _ => 1,
        }
    }

    /// Gain before penalization; fusion mode folds per-class gains by weight.
    pub fn raw_gain(&self, obs: &Observation) -> f64 {
        match (self.mode, &obs.gains) {
            (RewardMode::Fusion, Some(gains)) => {
                gains.iter().zip(&self.fusion_weights).map(|(g, w)| g * w).sum()
            }
            (RewardMode::Fusion, None) => obs.gain * self.fusion_weights.first().copied().unwrap_or(1.0),
            _ => obs.gain,
        }
    }

    /// `g − s·w` before normalization.
    pub fn penalized(&self, obs: &Observation) -> f64 {
        self.raw_gain(obs) - self.penalty_strength * obs.cost
    }

    /// Fits min/max of the penalized value over the given observations.
    pub fn fit<'a>(&mut self, observations: impl IntoIterator<Item = &'a Observation>) {
        if !self.needs_normalization() {
            return;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for obs in observations {
            let v = self.penalized(obs);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        } else if hi <= lo {
            log::warn!(
                "degenerate reward range at {lo}; widening to [{lo}, {}]",
                lo + 1.0
            );
            hi = lo + 1.0;
        }
        self.norm_min = Some(lo);
        self.norm_max = Some(hi);
    }

    pub fn reward_for(&self, obs: &Observation) -> Result<Reward> {
        match self.mode {
            RewardMode::Fusion => self.normalized(self.penalized(obs)),
            _ => compute_reward(obs.gain, obs.cost, self),
        }
    }

    fn normalized(&self, value: f64) -> Result<Reward> {
        let (Some(lo), Some(hi)) = (self.norm_min, self.norm_max) else {
            return Err(Error::Config(
                "reward normalization range not fitted on the training split".into(),
            ));
        };
        let raw = (value - lo) / (hi - lo);
        let label = raw.clamp(0.0, 1.0);
        Ok(Reward {
            embedding: vec![label],
            label,
            clipped: label != raw,
        })
    }
}

/// Reward label of one exposure with gain `gain` and cost `cost`.
pub fn compute_reward(gain: f64, cost: f64, spec: &RewardSpec) -> Result<Reward> {
    match spec.mode {
        RewardMode::Binary => Ok(Reward {
            embedding: vec![gain],
            label: gain,
            clipped: false,
        }),
        RewardMode::Continuous | RewardMode::Fusion => spec.normalized(gain - spec.penalty_strength * cost),
        RewardMode::Onehot => {
            let class = gain.round();
            if class < 0.0 || class as usize >= spec.num_classes {
                return Err(Error::Data(format!(
                    "gain category {gain} outside 0..{}",
                    spec.num_classes
                )));
            }
            let mut embedding = vec![0.0; spec.num_classes];
            embedding[class as usize] = 1.0;
            Ok(Reward {
                embedding,
                label: class,
                clipped: false,
            })
        }
    }
}
