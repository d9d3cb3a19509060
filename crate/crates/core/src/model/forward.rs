//! Forward pass: embedding, causal state encoder, causal attention, and the
//! action and reward decoders.
//!
//! Sequence tensors are `[d × n]` (features by positions) throughout; the
//! decoders return `[n × m]` action probabilities and `[n × w]` reward
//! predictions.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, RewardHead};
use super::params::{names, ModelParams};
use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, Tape, Tensor, Var};

/// Parameters registered as leaves on one tape.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(name, t.clone())))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))
    }
}

/// Training-mode dropout.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).shape().to_vec();
        let len = tape.value(x).len();
        let mask: Vec<f64> = (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.mul_const(x, Tensor::new(shape, mask)?)
    }
}

fn maybe_dropout(dropout: &mut Option<&mut Dropout<'_>>, tape: &mut Tape, x: Var) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub embedded: Var,
    pub states: Var,
    pub attended: Var,
    pub action_logits: Var,
    pub action_probs: Var,
    /// Reward decoder output before the head activation, `[n × w]`.
    pub reward_logits: Var,
    pub reward_preds: Var,
}

/// `X = W_e · fused_inputs`.
pub fn embed_sequence(tape: &mut Tape, p: &BoundParams, sample: &SequenceSample) -> Result<Var> {
    let fused = tape.constant(sample.fused_inputs.clone());
    tape.matmul(p.var(names::EMBED)?, fused)
}

/// Stacked dilated causal convolutions with residual connections, then
/// `S̃ = LeakyReLU(W_s H + B_s)`. Passes `x` through when disabled.
pub fn encode_causal_states(
    tape: &mut Tape,
    p: &BoundParams,
    x: Var,
    cfg: &ModelConfig,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    if !cfg.ablation.causal_state {
        return Ok(x);
    }
    let mut h = x;
    for (l, &dilation) in cfg.dilations.iter().enumerate() {
        let kernel = if cfg.weight_norm {
            let v = p.var(&names::tcn_direction(l))?;
            let g = p.var(&names::tcn_scale(l))?;
            tape.weight_norm(v, g)?
        } else {
            p.var(&names::tcn_kernel(l))?
        };
        let conv = tape.dilated_causal_conv1d(h, kernel, dilation)?;
        let act = tape.leaky_relu(conv, cfg.leaky_slope);
        let act = maybe_dropout(&mut dropout, tape, act)?;
        h = tape.add(h, act)?;
    }
    let lin = tape.matmul(p.var(names::STATE_W)?, h)?;
    let lin = tape.add_bias(lin, p.var(names::STATE_B)?)?;
    Ok(tape.leaky_relu(lin, cfg.leaky_slope))
}

/// Masked self-attention over causal states followed by the residual blocks.
/// Returns `M^(L2)` as `[d × n]`; passes `states` through when disabled.
pub fn causal_attention(
    tape: &mut Tape,
    p: &BoundParams,
    states: Var,
    valid: &[bool],
    cfg: &ModelConfig,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    if !cfg.ablation.causal_attention {
        return Ok(states);
    }
    let s_t = tape.transpose(states);
    let q = tape.matmul(s_t, p.var(names::ATTN_Q)?)?;
    let k = tape.matmul(s_t, p.var(names::ATTN_K)?)?;
    let v = tape.matmul(s_t, p.var(names::ATTN_V)?)?;
    let mask = AttentionMask::causal_with_padding(valid);

    let head_dim = cfg.hidden / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            let (a, b) = (h * head_dim, (h + 1) * head_dim);
            (
                tape.slice_cols(q, a, b)?,
                tape.slice_cols(k, a, b)?,
                tape.slice_cols(v, a, b)?,
            )
        };
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.masked_softmax(logits, mask.clone())?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let attended = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(heads)?
    };

    let mut m = tape.transpose(attended);
    for l in 0..cfg.attention_layers {
        let lin = tape.matmul(p.var(&names::block_w(l))?, m)?;
        let lin = tape.add_bias(lin, p.var(&names::block_b(l))?)?;
        let act = tape.leaky_relu(lin, cfg.leaky_slope);
        let act = maybe_dropout(&mut dropout, tape, act)?;
        m = if cfg.ablation.add_norm {
            let sum = tape.add(m, act)?;
            tape.layer_norm(
                sum,
                p.var(&names::block_ln_gain(l))?,
                p.var(&names::block_ln_bias(l))?,
                cfg.layer_norm_eps,
            )?
        } else {
            act
        };
    }
    Ok(m)
}

/// `Z = (W_Z M + B_Z)ᵀ`, row-wise softmax. Returns `(logits, probs)`, both `[n × m]`.
pub fn decode_actions(tape: &mut Tape, p: &BoundParams, attended: Var) -> Result<(Var, Var)> {
    let lin = tape.matmul(p.var(names::ACTION_W)?, attended)?;
    let lin = tape.add_bias(lin, p.var(names::ACTION_B)?)?;
    let logits = tape.transpose(lin);
    let probs = tape.softmax_rows(logits);
    Ok((logits, probs))
}

/// LeakyReLU MLP over the causal states and the configured head.
/// Returns `(logits, predictions)`, both `[n × w]`.
pub fn decode_rewards(
    tape: &mut Tape,
    p: &BoundParams,
    states: Var,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let mut h = states;
    for l in 0..cfg.reward_layers {
        let lin = tape.matmul(p.var(&names::reward_w(l))?, h)?;
        let lin = tape.add_bias(lin, p.var(&names::reward_b(l))?)?;
        h = tape.leaky_relu(lin, cfg.leaky_slope);
    }
    let out = tape.matmul(p.var(names::REWARD_OUT_W)?, h)?;
    let out = tape.add_bias(out, p.var(names::REWARD_OUT_B)?)?;
    let logits = tape.transpose(out);
    let preds = match cfg.reward_head {
        RewardHead::Sigmoid => tape.sigmoid(logits),
        RewardHead::Bounded => tape.unit_softsign(logits),
        RewardHead::Softmax => tape.softmax_rows(logits),
    };
    Ok((logits, preds))
}

pub fn forward_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    sample: &SequenceSample,
    cfg: &ModelConfig,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<ForwardVars> {
    let f = sample.fused_inputs.rows();
    let n = sample.fused_inputs.cols();
    if f != cfg.fused_dim || (n != cfg.seq_len && cfg.per_position_bias) {
        return Err(Error::Shape(format!(
            "sample is [{f} × {n}], model expects [{} × {}]",
            cfg.fused_dim, cfg.seq_len
        )));
    }
    let embedded = embed_sequence(tape, p, sample)?;
    let states = encode_causal_states(tape, p, embedded, cfg, dropout.as_deref_mut())?;
    let attended = causal_attention(tape, p, states, &sample.valid_mask, cfg, dropout)?;
    let (action_logits, action_probs) = decode_actions(tape, p, attended)?;
    let (reward_logits, reward_preds) = decode_rewards(tape, p, states, cfg)?;
    Ok(ForwardVars {
        embedded,
        states,
        attended,
        action_logits,
        action_probs,
        reward_logits,
        reward_preds,
    })
}

/// Values of one inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `S̃`, `[d × n]`.
    pub causal_states: Tensor,
    /// `M^(L2)`, `[d × n]`.
    pub attended: Tensor,
    /// `Ŷ`, `[n × m]`.
    pub action_probs: Tensor,
    /// `r̂`, `[n × w]`.
    pub reward_preds: Tensor,
}

impl ForwardOutput {
    /// Scalar reward prediction at step `t` (expected class index for softmax heads).
    pub fn reward_at(&self, t: usize) -> f64 {
        let row = self.reward_preds.row_values(t);
        if row.len() == 1 {
            row[0]
        } else {
            row.iter().enumerate().map(|(c, p)| c as f64 * p).sum()
        }
    }
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        super::params::validate_params(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = super::params::init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Inference pass with dropout disabled.
    pub fn forward(&self, sample: &SequenceSample) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &self.params);
        let v = forward_on_tape(&mut tape, &p, sample, &self.config, None)?;
        Ok(ForwardOutput {
            causal_states: tape.value(v.states).clone(),
            attended: tape.value(v.attended).clone(),
            action_probs: tape.value(v.action_probs).clone(),
            reward_preds: tape.value(v.reward_preds).clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Deterministic,
    Stochastic,
}

/// Argmax (lowest index on ties) or a categorical draw.
pub fn select_action(probs: &[f64], mode: SelectionMode, rng: &mut impl Rng) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Shape("empty probability row".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::NonFinite(format!(
            "invalid action probabilities {probs:?}"
        )));
    }
    match mode {
        SelectionMode::Deterministic => {
            let mut best = 0;
            for (j, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = j;
                }
            }
            Ok(best)
        }
        SelectionMode::Stochastic => {
            let total: f64 = probs.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (j, &p) in probs.iter().enumerate() {
                if u < p {
                    return Ok(j);
                }
                u -= p;
            }
            Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
        }
    }
}
