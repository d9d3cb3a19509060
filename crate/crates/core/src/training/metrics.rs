use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::RewardLoss;
use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::model::{select_action, Model, SelectionMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

/// Precision, recall and F1 from a confusion matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Channels with no ground-truth occurrence (excluded from macro averages).
    pub absent_channels: usize,
}

/// `confusion[truth][predicted]` counts.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], m: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = vec![vec![0u64; m]; m];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= m || p >= m {
            return Err(Error::Data(format!("class out of range for {m} channels")));
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Macro scores average per-channel precision and recall over channels
/// present in the ground truth; F1 is the harmonic mean of the two averages.
pub fn classification_metrics(confusion: &[Vec<u64>], averaging: Averaging) -> ClassificationMetrics {
    let m = confusion.len();
    let support: Vec<u64> = confusion.iter().map(|row| row.iter().sum()).collect();
    let predicted: Vec<u64> = (0..m).map(|j| confusion.iter().map(|row| row[j]).sum()).collect();
    let absent_channels = support.iter().filter(|&&s| s == 0).count();
    let (precision, recall) = match averaging {
        Averaging::Macro => {
            let present: Vec<usize> = (0..m).filter(|&c| support[c] > 0).collect();
            if present.is_empty() {
                (0.0, 0.0)
            } else {
                let k = present.len() as f64;
                let p: f64 = present
                    .iter()
                    .map(|&c| {
                        if predicted[c] == 0 {
                            0.0
                        } else {
                            confusion[c][c] as f64 / predicted[c] as f64
                        }
                    })
                    .sum();
                let r: f64 = present
                    .iter()
                    .map(|&c| confusion[c][c] as f64 / support[c] as f64)
                    .sum();
                (p / k, r / k)
            }
        }
        Averaging::Micro => {
            let total: u64 = support.iter().sum();
            let correct: u64 = (0..m).map(|c| confusion[c][c]).sum();
            let acc = if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            };
            (acc, acc)
        }
    };
    ClassificationMetrics {
        precision,
        recall,
        f1: harmonic(precision, recall),
        absent_channels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Accuracy for binary/class rewards, mean squared error for continuous ones.
    pub reward_metric: f64,
    pub reward_metric_name: String,
    pub averaging: Averaging,
    pub absent_channels: usize,
    pub steps: usize,
}

/// Argmax predictions against logged actions at every valid step.
pub fn evaluate(
    model: &Model,
    samples: &[SequenceSample],
    reward_loss: RewardLoss,
    averaging: Averaging,
) -> Result<EvalReport> {
    let m = model.config.channels;
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    let mut reward_acc = 0.0;
    // Deterministic selection never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in samples {
        if s.valid_steps() == 0 {
            continue;
        }
        let out = model.forward(s)?;
        for t in (0..s.len()).filter(|&t| s.valid_mask[t]) {
            let p = select_action(
                out.action_probs.row_values(t),
                SelectionMode::Deterministic,
                &mut rng,
            )?;
            truth.push(s.action_labels[t]);
            predicted.push(p);
            let label = s.reward_labels[t];
            reward_acc += match reward_loss {
                RewardLoss::Mse => (out.reward_at(t) - label).powi(2),
                RewardLoss::Bce => f64::from((out.reward_at(t) >= 0.5) == (label >= 0.5)),
                RewardLoss::CrossEntropy => {
                    let row = out.reward_preds.row_values(t);
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    f64::from(best as f64 == label.round())
                }
            };
        }
    }
    let cm = confusion_matrix(&truth, &predicted, m)?;
    let metrics = classification_metrics(&cm, averaging);
    if metrics.absent_channels > 0 {
        log::warn!(
            "{} channel(s) absent from ground truth; excluded from the average",
            metrics.absent_channels
        );
    }
    let steps = truth.len();
    Ok(EvalReport {
        f1: metrics.f1,
        precision: metrics.precision,
        recall: metrics.recall,
        reward_metric: if steps == 0 {
            0.0
        } else {
            reward_acc / steps as f64
        },
        reward_metric_name: match reward_loss {
            RewardLoss::Mse => "mse",
            _ => "accuracy",
        }
        .into(),
        averaging,
        absent_channels: metrics.absent_channels,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_channel_confusion() {
        let cm = vec![vec![2, 1], vec![1, 2]];
        let r = classification_metrics(&cm, Averaging::Macro);
        for v in [r.precision, r.recall, r.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions() {
        let cm = confusion_matrix(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        let r = classification_metrics(&cm, Averaging::Macro);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_channel_is_excluded_and_counted() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 0, 1], 3).unwrap();
        let r = classification_metrics(&cm, Averaging::Macro);
        assert_eq!(r.absent_channels, 1);
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn micro_is_accuracy() {
        let cm = vec![vec![3, 1], vec![0, 0]];
        let r = classification_metrics(&cm, Averaging::Micro);
        assert_eq!(r.precision, 0.75);
    }
}
