//! Policy, reward and pairwise-preference losses.
//!
//! Every loss is a masked mean over valid steps of a whole batch, so padded
//! steps (and fully padded samples) contribute nothing.

use serde::{Deserialize, Serialize};

use crate::data::{RewardMode, SequenceSample};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, BoundParams, Dropout, ForwardVars, Model, ModelConfig, RewardHead};
use crate::numerics::{Objective, ParamSet, Tape, Tensor, Var};

/// Floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Reward loss weight.
    pub mu: f64,
    /// Preference loss weight.
    pub lambda: f64,
    /// Preference temperature.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu: 0.08,
            lambda: 1.4,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::Config("loss.mu must be finite and ≥ 0".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config("loss.lambda must be finite and ≥ 0".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config("loss.beta must be finite and > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardLoss {
    /// Binary cross-entropy.
    Bce,
    /// Mean squared error.
    Mse,
    /// Multi-class cross-entropy.
    CrossEntropy,
}

impl From<RewardMode> for RewardLoss {
    fn from(mode: RewardMode) -> Self {
        match mode {
            RewardMode::Binary => RewardLoss::Bce,
            RewardMode::Continuous | RewardMode::Fusion => RewardLoss::Mse,
            RewardMode::Onehot => RewardLoss::CrossEntropy,
        }
    }
}

/// A preferred and a dispreferred sequence.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub winner: SequenceSample,
    pub loser: SequenceSample,
}

impl PairSample {
    /// Requires the winner's total reward to be strictly larger.
    pub fn new(winner: SequenceSample, loser: SequenceSample) -> Result<Self> {
        if !(winner.total_reward() > loser.total_reward()) {
            return Err(Error::Data(format!(
                "pair winner total {} is not above loser total {}",
                winner.total_reward(),
                loser.total_reward()
            )));
        }
        Ok(Self { winner, loser })
    }
}

/// Scalar loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub policy: f64,
    pub reward: f64,
    pub dpo: f64,
    pub total: f64,
}

/// Tape handles of the loss components (`None` when a component has no terms).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub policy: Option<Var>,
    pub reward: Option<Var>,
    pub dpo: Option<Var>,
    pub total: Var,
}

fn valid_steps(mask: &[bool]) -> impl Iterator<Item = usize> + '_ {
    mask.iter().enumerate().filter(|(_, &v)| v).map(|(t, _)| t)
}

fn sum_vars(tape: &mut Tape, parts: Vec<Var>) -> Result<Option<Var>> {
    let mut iter = parts.into_iter();
    let Some(mut acc) = iter.next() else {
        return Ok(None);
    };
    for p in iter {
        acc = tape.add(acc, p)?;
    }
    Ok(Some(acc))
}

/// `Σ_valid −ln ŷ[t, label_t] / denom`.
fn policy_term(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    mask: &[bool],
    denom: f64,
) -> Result<Option<Var>> {
    let m = tape.value(probs).cols();
    let idx: Vec<usize> = valid_steps(mask).map(|t| t * m + labels[t]).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    if let Some(&bad) = valid_steps(mask).map(|t| &labels[t]).find(|&&l| l >= m) {
        return Err(Error::Data(format!(
            "action label {bad} out of range for {m} channels"
        )));
    }
    let count = idx.len();
    let picked = tape.gather(probs, idx)?;
    let logs = tape.ln_floor(picked, PROB_FLOOR);
    Ok(Some(tape.dot(logs, vec![-1.0 / denom; count])?))
}

/// `sigmoid_logits`, when given, are the pre-activations of a sigmoid head;
/// BCE then uses log-sigmoid directly instead of logs of rounded probabilities.
fn reward_term(
    tape: &mut Tape,
    preds: Var,
    sigmoid_logits: Option<Var>,
    labels: &[f64],
    mask: &[bool],
    kind: RewardLoss,
    denom: f64,
) -> Result<Option<Var>> {
    let steps: Vec<usize> = valid_steps(mask).collect();
    if steps.is_empty() {
        return Ok(None);
    }
    let width = tape.value(preds).cols();
    let targets: Vec<f64> = steps.iter().map(|&t| labels[t]).collect();
    let term = match kind {
        RewardLoss::Bce | RewardLoss::Mse => {
            if width != 1 {
                return Err(Error::Shape(format!(
                    "{kind:?} reward loss needs a scalar head, got width {width}"
                )));
            }
            if kind == RewardLoss::Bce {
                let (log_p, log_q) = match sigmoid_logits {
                    Some(z) => {
                        let z = tape.gather(z, steps.clone())?;
                        let neg = tape.scale(z, -1.0);
                        let lp = tape.log_sigmoid(z);
                        let lq = tape.log_sigmoid(neg);
                        let floor = PROB_FLOOR.ln();
                        (tape.max_const(lp, floor), tape.max_const(lq, floor))
                    }
                    None => {
                        let picked = tape.gather(preds, steps.clone())?;
                        let one_minus = tape.affine(picked, -1.0, 1.0);
                        (
                            tape.ln_floor(picked, PROB_FLOOR),
                            tape.ln_floor(one_minus, PROB_FLOOR),
                        )
                    }
                };
                let pos = tape.dot(log_p, targets.iter().map(|r| -r / denom).collect())?;
                let neg = tape.dot(log_q, targets.iter().map(|r| -(1.0 - r) / denom).collect())?;
                tape.add(pos, neg)?
            } else {
                let picked = tape.gather(preds, steps.clone())?;
                let target = tape.constant(Tensor::column(targets)?);
                let diff = tape.sub(picked, target)?;
                let sq = tape.square(diff);
                tape.dot(sq, vec![1.0 / denom; steps.len()])?
            }
        }
        RewardLoss::CrossEntropy => {
            let mut idx = Vec::with_capacity(steps.len());
            for (&t, &c) in steps.iter().zip(&targets) {
                let class = c.round();
                if class < 0.0 || class as usize >= width {
                    return Err(Error::Data(format!("reward class {c} out of range for {width}")));
                }
                idx.push(t * width + class as usize);
            }
            let picked = tape.gather(preds, idx)?;
            let logs = tape.ln_floor(picked, PROB_FLOOR);
            tape.dot(logs, vec![-1.0 / denom; steps.len()])?
        }
    };
    Ok(Some(term))
}

/// Per-pair log-probability differences over steps valid in both sequences.
fn dpo_term(
    tape: &mut Tape,
    winner: (&SequenceSample, Var),
    loser: (&SequenceSample, Var),
    beta: f64,
    denom: f64,
) -> Result<Option<Var>> {
    let (ws, wp) = winner;
    let (ls, lp) = loser;
    let m = tape.value(wp).cols();
    let steps: Vec<usize> = (0..ws.len().min(ls.len()))
        .filter(|&t| ws.valid_mask[t] && ls.valid_mask[t])
        .collect();
    if steps.is_empty() {
        return Ok(None);
    }
    let wi: Vec<usize> = steps.iter().map(|&t| t * m + ws.action_labels[t]).collect();
    let li: Vec<usize> = steps.iter().map(|&t| t * m + ls.action_labels[t]).collect();
    let w = tape.gather(wp, wi)?;
    let w = tape.ln_floor(w, PROB_FLOOR);
    let l = tape.gather(lp, li)?;
    let l = tape.ln_floor(l, PROB_FLOOR);
    let diff = tape.sub(w, l)?;
    let scaled = tape.scale(diff, beta);
    let ls = tape.log_sigmoid(scaled);
    Ok(Some(tape.dot(ls, vec![-1.0 / denom; steps.len()])?))
}

/// Number of steps that carry a preference term for `pairs`.
fn pair_steps(samples: &[SequenceSample], pairs: &[(usize, usize)]) -> usize {
    pairs
        .iter()
        .map(|&(w, l)| {
            let (a, b) = (&samples[w], &samples[l]);
            (0..a.len().min(b.len()))
                .filter(|&t| a.valid_mask[t] && b.valid_mask[t])
                .count()
        })
        .sum()
}

/// Builds the batch objective on `tape`:
/// `L = L_policy + μ·L_reward + λ·L_pref`, with each component a mean over
/// the batch's valid steps. `pairs` index `(winner, loser)` into `samples`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    samples: &[SequenceSample],
    pairs: &[(usize, usize)],
    weights: &LossWeights,
    reward_loss: RewardLoss,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<LossVars> {
    let total_valid: usize = samples.iter().map(SequenceSample::valid_steps).sum();
    let denom = total_valid.max(1) as f64;

    let mut forwards: Vec<Option<ForwardVars>> = Vec::with_capacity(samples.len());
    for s in samples {
        if s.valid_steps() == 0 {
            forwards.push(None);
            continue;
        }
        forwards.push(Some(forward_on_tape(
            tape,
            bound,
            s,
            cfg,
            dropout.as_deref_mut(),
        )?));
    }

    let mut policy_parts = Vec::new();
    let mut reward_parts = Vec::new();
    for (s, fv) in samples.iter().zip(&forwards) {
        let Some(fv) = fv else { continue };
        if let Some(v) = policy_term(tape, fv.action_probs, &s.action_labels, &s.valid_mask, denom)? {
            policy_parts.push(v);
        }
        let logits = (cfg.reward_head == RewardHead::Sigmoid).then_some(fv.reward_logits);
        if let Some(v) = reward_term(
            tape,
            fv.reward_preds,
            logits,
            &s.reward_labels,
            &s.valid_mask,
            reward_loss,
            denom,
        )? {
            reward_parts.push(v);
        }
    }

    let pair_denom = pair_steps(samples, pairs).max(1) as f64;
    let mut dpo_parts = Vec::new();
    for &(w, l) in pairs {
        let (Some(fw), Some(fl)) = (&forwards[w], &forwards[l]) else {
            continue;
        };
        if let Some(v) = dpo_term(
            tape,
            (&samples[w], fw.action_probs),
            (&samples[l], fl.action_probs),
            weights.beta,
            pair_denom,
        )? {
            dpo_parts.push(v);
        }
    }

    let policy = sum_vars(tape, policy_parts)?;
    let reward = sum_vars(tape, reward_parts)?;
    let dpo = sum_vars(tape, dpo_parts)?;

    let mut total = match policy {
        Some(p) => p,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    if let (Some(r), true) = (reward, weights.mu != 0.0) {
        let scaled = tape.scale(r, weights.mu);
        total = tape.add(total, scaled)?;
    }
    if let (Some(d), true) = (dpo, weights.lambda != 0.0) {
        let scaled = tape.scale(d, weights.lambda);
        total = tape.add(total, scaled)?;
    }
    Ok(LossVars {
        policy,
        reward,
        dpo,
        total,
    })
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let read = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossBreakdown {
            policy: read(self.policy),
            reward: read(self.reward),
            dpo: read(self.dpo),
            total: tape.scalar(self.total),
        }
    }
}

/// Evaluates the batch objective (dropout off), optionally with gradients.
pub fn batch_loss(
    model: &Model,
    samples: &[SequenceSample],
    pairs: &[(usize, usize)],
    weights: &LossWeights,
    reward_loss: RewardLoss,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<ParamSet>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &model.params);
    let vars = batch_loss_on_tape(
        &mut tape,
        &bound,
        &model.config,
        samples,
        pairs,
        weights,
        reward_loss,
        None,
    )?;
    let grads = if with_grad {
        Some(tape.backward(vars.total)?)
    } else {
        None
    };
    Ok((vars.breakdown(&tape), grads))
}

/// The batch objective as a function of the parameters, for gradient checks.
pub struct LossObjective<'a> {
    pub config: &'a ModelConfig,
    pub samples: &'a [SequenceSample],
    pub pairs: &'a [(usize, usize)],
    pub weights: LossWeights,
    pub reward_loss: RewardLoss,
}

impl LossObjective<'_> {
    fn eval(&self, params: &ParamSet, with_grad: bool) -> Result<(LossBreakdown, Option<ParamSet>)> {
        let model = Model {
            config: self.config.clone(),
            params: params.clone(),
        };
        batch_loss(
            &model,
            self.samples,
            self.pairs,
            &self.weights,
            self.reward_loss,
            with_grad,
        )
    }
}

impl Objective for LossObjective<'_> {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        Ok(self.eval(params, false)?.0.total)
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let (b, g) = self.eval(params, true)?;
        Ok((b.total, g.expect("gradient requested")))
    }

    fn value_parts(&self, params: &ParamSet) -> Result<Vec<f64>> {
        let b = self.eval(params, false)?.0;
        Ok(vec![
            b.policy,
            self.weights.mu * b.reward,
            self.weights.lambda * b.dpo,
        ])
    }
}

/// Mean over valid steps of `−Σ_j y_tj ln ŷ_tj` for one-hot targets.
pub fn policy_loss(probs: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let denom = mask.iter().filter(|&&v| v).count().max(1) as f64;
    Ok(policy_term(&mut tape, p, labels, mask, denom)?.map_or(0.0, |v| tape.scalar(v)))
}

/// Masked mean of the per-step reward loss; `preds` is `[n × w]`.
pub fn reward_loss(preds: &Tensor, labels: &[f64], mask: &[bool], kind: RewardLoss) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(preds.clone());
    let denom = mask.iter().filter(|&&v| v).count().max(1) as f64;
    Ok(reward_term(&mut tape, p, None, labels, mask, kind, denom)?.map_or(0.0, |v| tape.scalar(v)))
}

/// Mean over pairs and shared valid steps of `−ln σ(β (ln π_w − ln π_l))`.
pub fn dpo_loss(pairs: &[PairSample], model: &Model, beta: f64) -> Result<f64> {
    if pairs.is_empty() {
        log::warn!("no preference pairs; preference loss is 0 for this batch");
        return Ok(0.0);
    }
    let mut samples = Vec::with_capacity(pairs.len() * 2);
    let mut idx = Vec::with_capacity(pairs.len());
    for p in pairs {
        idx.push((samples.len(), samples.len() + 1));
        samples.push(p.winner.clone());
        samples.push(p.loser.clone());
    }
    let weights = LossWeights {
        mu: 0.0,
        lambda: 1.0,
        beta,
    };
    let (b, _) = batch_loss(model, &samples, &idx, &weights, RewardLoss::Mse, false)?;
    Ok(b.dpo)
}

/// `L_policy + μ·L_reward + λ·L_pref` over a batch and explicit pairs.
pub fn total_loss(
    model: &Model,
    batch: &[SequenceSample],
    pairs: &[(usize, usize)],
    weights: &LossWeights,
    reward_loss: RewardLoss,
) -> Result<LossBreakdown> {
    Ok(batch_loss(model, batch, pairs, weights, reward_loss, false)?.0)
}
