use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DEFAULT_LAYER_NORM_EPS, DEFAULT_LEAKY_SLOPE};

/// Output activation of the reward decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardHead {
    /// Binary rewards.
    Sigmoid,
    /// Continuous rewards mapped into `(0, 1)`.
    Bounded,
    /// Multi-class rewards.
    Softmax,
}

/// Switches for the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub causal_state: bool,
    pub causal_attention: bool,
    pub add_norm: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            causal_state: true,
            causal_attention: true,
            add_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden size `d`.
    pub hidden: usize,
    /// Fused input height `F`.
    pub fused_dim: usize,
    /// Sequence length `n`.
    pub seq_len: usize,
    /// Channel count `m`.
    pub channels: usize,
    /// One dilation per causal-convolution layer.
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub attention_layers: usize,
    pub reward_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub layer_norm_eps: f64,
    pub reward_head: RewardHead,
    /// Reward classes for the softmax head.
    pub reward_classes: usize,
    pub weight_norm: bool,
    /// Biases are `[· × n]` when true, `[· × 1]` broadcast otherwise.
    pub per_position_bias: bool,
    pub init_std: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            fused_dim: 8,
            seq_len: 20,
            channels: 3,
            dilations: vec![1, 2],
            kernel_size: 3,
            attention_layers: 2,
            reward_layers: 3,
            heads: 1,
            dropout: 0.1,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
            reward_head: RewardHead::Bounded,
            reward_classes: 2,
            weight_norm: true,
            per_position_bias: true,
            init_std: 0.02,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn tcn_layers(&self) -> usize {
        self.dilations.len()
    }

    /// Width of the reward decoder output per position.
    pub fn reward_width(&self) -> usize {
        match self.reward_head {
            RewardHead::Softmax => self.reward_classes,
            _ => 1,
        }
    }

    /// Bias width: `n` for per-position biases, else 1.
    pub fn bias_cols(&self) -> usize {
        if self.per_position_bias {
            self.seq_len
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("fused_dim", self.fused_dim),
            ("seq_len", self.seq_len),
            ("channels", self.channels),
            ("kernel_size", self.kernel_size),
            ("heads", self.heads),
            ("dilations", self.dilations.len()),
            ("attention_layers", self.attention_layers),
            ("reward_layers", self.reward_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.dilations.contains(&0) {
            return Err(Error::Config("model.dilations entries must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.hidden {} is not divisible by model.heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("model.leaky_slope must be in (0, 1)".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("model.layer_norm_eps must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("model.init_std must be positive".into()));
        }
        if self.reward_head == RewardHead::Softmax && self.reward_classes < 2 {
            return Err(Error::Config(
                "softmax reward head needs at least 2 classes".into(),
            ));
        }
        Ok(())
    }
}

/// Hyperparameter search ranges exposed as configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub embedding_size: Vec<usize>,
    pub hidden_size: Vec<usize>,
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub seq_len: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            batch_size: vec![32, 64, 128, 256, 512, 1024, 2048],
            learning_rate: vec![1e-2, 5e-3, 1e-3, 5e-4, 1e-4],
            dropout: vec![0.1, 0.2, 0.5],
            weight_decay: vec![0.0, 1e-4, 1e-5, 1e-6],
            embedding_size: vec![64, 128, 256, 512],
            hidden_size: vec![128, 256, 512, 768],
            layers: vec![2, 3, 4],
            heads: vec![1, 2, 4, 8],
            seq_len: vec![5, 10, 15, 20, 25, 30, 35, 40],
        }
    }
}
