use serde::{Deserialize, Serialize};

use super::{build_state, encode_action, Journey, Observation, RewardSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_MIN_JOURNEY_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    /// Window length `n`.
    pub seq_len: usize,
    /// Journeys shorter than this are discarded.
    #[serde(default = "default_min_len")]
    pub min_journey_len: usize,
    /// Offset between window starts; `None` means non-overlapping (`seq_len`).
    #[serde(default)]
    pub stride: Option<usize>,
    pub channels: usize,
    pub touch_dim: usize,
    pub static_dim: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            seq_len: 20,
            min_journey_len: DEFAULT_MIN_JOURNEY_LEN,
            stride: None,
            channels: 3,
            touch_dim: 2,
            static_dim: 3,
        }
    }
}

fn default_min_len() -> usize {
    DEFAULT_MIN_JOURNEY_LEN
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config("sequence length must be at least 2".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("at least one channel is required".into()));
        }
        if let Some(stride) = self.stride {
            if stride == 0 || stride > self.seq_len {
                return Err(Error::Config(format!(
                    "stride must be in 1..={} (the sequence length)",
                    self.seq_len
                )));
            }
        }
        Ok(())
    }

    /// Height `F` of a fused column `concat(a_{t−1}, r_{t−1}, s_t)`.
    pub fn fused_dim(&self, spec: &RewardSpec) -> usize {
        self.channels + spec.embedding_dim() + self.touch_dim + self.static_dim
    }

    fn stride(&self) -> usize {
        self.stride.unwrap_or(self.seq_len)
    }
}

/// Fixed-length window of fused columns, left-padded, with per-step labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub user_id: String,
    /// `[F × n]`.
    pub fused_inputs: Tensor,
    pub action_labels: Vec<usize>,
    pub reward_labels: Vec<f64>,
    pub valid_mask: Vec<bool>,
    /// Source timestamps per step (0 on padding).
    pub timestamps: Vec<i64>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_mask.is_empty()
    }

    pub fn valid_steps(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Sum of reward labels over valid steps.
    pub fn total_reward(&self) -> f64 {
        self.reward_labels
            .iter()
            .zip(&self.valid_mask)
            .filter(|(_, &v)| v)
            .map(|(r, _)| r)
            .sum()
    }

    /// A sample with every step masked out.
    pub fn padding(user_id: &str, fused_dim: usize, seq_len: usize) -> Self {
        Self {
            user_id: user_id.to_string(),
            fused_inputs: Tensor::zeros(&[fused_dim, seq_len]),
            action_labels: vec![0; seq_len],
            reward_labels: vec![0.0; seq_len],
            valid_mask: vec![false; seq_len],
            timestamps: vec![0; seq_len],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuiltSequences {
    pub samples: Vec<SequenceSample>,
    pub discarded: bool,
    pub clipped: usize,
}

/// Cuts a journey into fused windows of length `n`.
///
/// Column `t` holds `concat(a_{t−1}, r_{t−1}, s_t)`; the first exposure of a
/// journey sees zero vectors for the previous action and reward. A window
/// that starts mid-journey still carries the true previous exposure.
pub fn build_sequences(journey: &Journey, cfg: &SequenceConfig, spec: &RewardSpec) -> Result<BuiltSequences> {
    cfg.validate()?;
    journey.validate(cfg.channels)?;
    let len = journey.observations.len();
    if len < cfg.min_journey_len {
        return Ok(BuiltSequences {
            discarded: true,
            ..Default::default()
        });
    }
    let columns = fused_columns(journey, &journey.observations, cfg, spec)?;
    let clipped = columns.iter().filter(|c| c.reward_clipped).count();

    let n = cfg.seq_len;
    let mut samples = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + n).min(len);
        samples.push(assemble(&journey.user_id, &columns[start..end], cfg, spec));
        if start + n >= len {
            break;
        }
        start += cfg.stride();
    }
    Ok(BuiltSequences {
        samples,
        discarded: false,
        clipped,
    })
}

/// Inference window: the latest `n − 1` exposures of `history` followed by a
/// query column for the next exposure with touch features `next_touch`.
///
/// The query column is the last position; its labels are placeholders.
pub fn query_sample(
    user_id: &str,
    history: &[Observation],
    next_touch: &[f64],
    profile: &[f64],
    cfg: &SequenceConfig,
    spec: &RewardSpec,
) -> Result<SequenceSample> {
    let keep = history.len().min(cfg.seq_len - 1);
    let recent = &history[history.len() - keep..];
    let journey = Journey {
        user_id: user_id.to_string(),
        static_features: profile.to_vec(),
        observations: Vec::new(),
    };
    let mut columns = fused_columns(&journey, recent, cfg, spec)?;
    let query = Observation::new(0, next_touch.to_vec(), 0.0, 0.0, 0);
    let state = build_state(&query, profile, cfg.touch_dim, cfg.static_dim, user_id)?;
    let (prev_action, prev_reward) = match history.last() {
        Some(prev) => (
            encode_action(prev.channel, cfg.channels)?,
            spec.reward_for(prev)?.embedding,
        ),
        None => (vec![0.0; cfg.channels], vec![0.0; spec.embedding_dim()]),
    };
    columns.push(Column {
        values: [prev_action, prev_reward, state].concat(),
        action: 0,
        reward: 0.0,
        timestamp: history.last().map_or(0, |o| o.timestamp),
        reward_clipped: false,
    });
    Ok(assemble(user_id, &columns, cfg, spec))
}

struct Column {
    values: Vec<f64>,
    action: usize,
    reward: f64,
    timestamp: i64,
    reward_clipped: bool,
}

fn fused_columns(
    journey: &Journey,
    observations: &[Observation],
    cfg: &SequenceConfig,
    spec: &RewardSpec,
) -> Result<Vec<Column>> {
    let mut prev_action = vec![0.0; cfg.channels];
    let mut prev_reward = vec![0.0; spec.embedding_dim()];
    let mut columns = Vec::with_capacity(observations.len());
    for obs in observations {
        if obs.channel >= cfg.channels {
            return Err(Error::Data(format!(
                "journey {}: channel {} out of range",
                journey.user_id, obs.channel
            )));
        }
        let state = build_state(
            obs,
            &journey.static_features,
            cfg.touch_dim,
            cfg.static_dim,
            &journey.user_id,
        )?;
        let reward = spec.reward_for(obs)?;
        let mut values = Vec::with_capacity(cfg.fused_dim(spec));
        values.extend_from_slice(&prev_action);
        values.extend_from_slice(&prev_reward);
        values.extend_from_slice(&state);
        columns.push(Column {
            values,
            action: obs.channel,
            reward: reward.label,
            timestamp: obs.timestamp,
            reward_clipped: reward.clipped,
        });
        prev_action = encode_action(obs.channel, cfg.channels)?;
        prev_reward = reward.embedding;
    }
    Ok(columns)
}

fn assemble(user_id: &str, columns: &[Column], cfg: &SequenceConfig, spec: &RewardSpec) -> SequenceSample {
    let n = cfg.seq_len;
    let f = cfg.fused_dim(spec);
    let mut sample = SequenceSample::padding(user_id, f, n);
    let offset = n - columns.len();
    for (k, col) in columns.iter().enumerate() {
        let t = offset + k;
        for (r, &v) in col.values.iter().enumerate() {
            sample.fused_inputs.set(r, t, v);
        }
        sample.action_labels[t] = col.action;
        sample.reward_labels[t] = col.reward;
        sample.valid_mask[t] = true;
        sample.timestamps[t] = col.timestamp;
    }
    sample
}
