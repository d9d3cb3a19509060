use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss_on_tape, LossBreakdown, LossWeights, RewardLoss};
use super::metrics::{evaluate, Averaging, EvalReport};
use super::optimizer::{Adam, AdamConfig};
use super::pairs::build_pairs;
use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::model::{BoundParams, Dropout, Model};
use crate::numerics::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-F1 improvement before stopping; 0 disables.
    pub patience: usize,
    pub loss: LossWeights,
    pub averaging: Averaging,
    /// Stop once the epoch's mean policy loss falls below this value.
    pub stop_below_policy_loss: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_size: 512,
            max_epochs: 800,
            patience: 20,
            loss: LossWeights::default(),
            averaging: Averaging::Macro,
            stop_below_policy_loss: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub policy_loss: f64,
    pub reward_loss: f64,
    pub dpo_loss: f64,
    pub total: f64,
    pub val_f1: Option<f64>,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters after the last completed epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Epoch with the best validation F1 (the last epoch without validation data).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mini-batch training of all three objectives.
pub fn fit(
    model: Model,
    train: &[SequenceSample],
    validation: &[SequenceSample],
    reward_loss: RewardLoss,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.optimizer, &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut weight = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<SequenceSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let steps = batch.iter().map(SequenceSample::valid_steps).sum::<usize>() as f64;
            if steps == 0.0 {
                continue;
            }
            let pairs = if cfg.loss.lambda != 0.0 {
                build_pairs(&batch, &mut rng)
            } else {
                Vec::new()
            };
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &model.params);
            let mut dropout = Dropout {
                rate: model.config.dropout,
                rng: &mut rng,
            };
            let vars = batch_loss_on_tape(
                &mut tape,
                &bound,
                &model.config,
                &batch,
                &pairs,
                &cfg.loss,
                reward_loss,
                Some(&mut dropout),
            )?;
            let parts = vars.breakdown(&tape);
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch}, batch {b}",
                    parts.total
                )));
            }
            let grads = tape.backward(vars.total)?;
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}, batch {b}")));
            }
            adam.step(&mut model.params, &grads);
            sums.policy += parts.policy * steps;
            sums.reward += parts.reward * steps;
            sums.dpo += parts.dpo * steps;
            sums.total += parts.total * steps;
            weight += steps;
        }
        let w = weight.max(1.0);
        let val: Option<EvalReport> = if validation.iter().any(|s| s.valid_steps() > 0) {
            Some(evaluate(&model, validation, reward_loss, cfg.averaging)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            policy_loss: sums.policy / w,
            reward_loss: sums.reward / w,
            dpo_loss: sums.dpo / w,
            total: sums.total / w,
            val_f1: val.as_ref().map(|r| r.f1),
            val_precision: val.as_ref().map(|r| r.precision),
            val_recall: val.as_ref().map(|r| r.recall),
        };
        log::debug!(
            "epoch {epoch}: total {:.6} policy {:.6} val_f1 {:?}",
            record.total,
            record.policy_loss,
            record.val_f1
        );
        let policy = record.policy_loss;
        history.push(record);

        if let Some(r) = &val {
            match best {
                Some((f1, _)) if r.f1 <= f1 => {}
                _ => best = Some((r.f1, epoch)),
            }
            if cfg.patience > 0 && epoch - best.map_or(epoch, |b| b.1) >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        if cfg.stop_below_policy_loss.is_some_and(|target| policy < target) {
            stopped_early = true;
            break;
        }
    }
    let last = history.last().map_or(0, |r| r.epoch);
    Ok(FitResult {
        model,
        history,
        best_epoch: best.map_or(last, |b| b.1),
        stopped_early,
    })
}
