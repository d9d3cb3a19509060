use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_sequences, Journey, RewardSpec, SequenceConfig, SequenceSample};
use crate::error::{Error, Result};

const TRAIN_FRACTION: f64 = 0.8;
const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<SequenceSample>,
    pub validation: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles users by `seed`, then fills train/validation/test to 0.8/0.1/0.1 of
/// the sample count. All samples of one user land in the same part.
pub fn split_dataset(samples: Vec<SequenceSample>, seed: u64) -> Result<DatasetSplit> {
    if samples.len() < 10 {
        return Err(Error::Data(format!(
            "need at least 10 samples to split, got {}",
            samples.len()
        )));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry(s.user_id.clone()).or_default() += 1;
    }
    let assignment = assign_users(&counts, seed);
    let mut split = DatasetSplit::default();
    for s in samples {
        match assignment[&s.user_id] {
            SplitPart::Train => split.train.push(s),
            SplitPart::Validation => split.validation.push(s),
            SplitPart::Test => split.test.push(s),
        }
    }
    Ok(split)
}

fn assign_users(counts: &BTreeMap<String, usize>, seed: u64) -> BTreeMap<String, SplitPart> {
    let total: usize = counts.values().sum();
    let train_target = (TRAIN_FRACTION * total as f64).round() as usize;
    let val_target = (VALIDATION_FRACTION * total as f64).round() as usize;

    let mut users: Vec<&String> = counts.keys().collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (mut n_train, mut n_val) = (0, 0);
    let mut out = BTreeMap::new();
    for user in users {
        let c = counts[user];
        let part = if n_train < train_target {
            n_train += c;
            SplitPart::Train
        } else if n_val < val_target {
            n_val += c;
            SplitPart::Validation
        } else {
            SplitPart::Test
        };
        out.insert(user.clone(), part);
    }
    out
}

/// Journeys turned into a split, with reward normalization fitted on train only.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub reward_spec: RewardSpec,
    pub discarded_journeys: usize,
    pub rejected_journeys: usize,
    pub clipped_rewards: usize,
}

pub fn prepare_dataset(
    journeys: &[Journey],
    cfg: &SequenceConfig,
    spec: &RewardSpec,
    seed: u64,
) -> Result<PreparedData> {
    cfg.validate()?;
    let mut rejected = 0;
    let mut discarded = 0;
    let mut kept: Vec<&Journey> = Vec::new();
    for j in journeys {
        if let Err(e) = j.validate(cfg.channels) {
            log::warn!("rejecting journey: {e}");
            rejected += 1;
        } else if j.observations.len() < cfg.min_journey_len {
            discarded += 1;
        } else {
            kept.push(j);
        }
    }

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for j in &kept {
        *counts.entry(j.user_id.clone()).or_default() += window_count(j.observations.len(), cfg);
    }
    let total: usize = counts.values().sum();
    if total < 10 {
        return Err(Error::Data(format!(
            "only {total} sequence samples after filtering; need at least 10"
        )));
    }
    let assignment = assign_users(&counts, seed);

    let mut fitted = spec.clone();
    fitted.fit(
        kept.iter()
            .filter(|j| assignment[&j.user_id] == SplitPart::Train)
            .flat_map(|j| j.observations.iter()),
    );

    let mut split = DatasetSplit::default();
    let mut clipped = 0;
    for j in kept {
        let built = match build_sequences(j, cfg, &fitted) {
            Ok(b) => b,
            Err(e @ Error::Data(_)) => {
                log::warn!("rejecting journey: {e}");
                rejected += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        clipped += built.clipped;
        let target = match assignment[&j.user_id] {
            SplitPart::Train => &mut split.train,
            SplitPart::Validation => &mut split.validation,
            SplitPart::Test => &mut split.test,
        };
        target.extend(built.samples);
    }
    if clipped > 0 {
        log::info!("{clipped} reward labels clipped into [0, 1]");
    }
    Ok(PreparedData {
        split,
        reward_spec: fitted,
        discarded_journeys: discarded,
        rejected_journeys: rejected,
        clipped_rewards: clipped,
    })
}

fn window_count(len: usize, cfg: &SequenceConfig) -> usize {
    let n = cfg.seq_len;
    let stride = cfg.stride.unwrap_or(n);
    if len <= n {
        1
    } else {
        (len - n).div_ceil(stride) + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Observation, RewardMode};

    fn samples(count: usize) -> Vec<SequenceSample> {
        (0..count)
            .map(|i| SequenceSample::padding(&format!("user{i:03}"), 2, 2))
            .collect()
    }

    #[test]
    fn exact_ratios() {
        let s = split_dataset(samples(100), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        let s = split_dataset(samples(10), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        assert!(split_dataset(samples(9), 1).is_err());
    }

    #[test]
    fn deterministic_by_seed() {
        let ids = |s: &DatasetSplit| s.test.iter().map(|x| x.user_id.clone()).collect::<Vec<_>>();
        let a = split_dataset(samples(50), 7).unwrap();
        let b = split_dataset(samples(50), 7).unwrap();
        let c = split_dataset(samples(50), 8).unwrap();
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(ids(&a), ids(&c));
    }

    #[test]
    fn users_never_straddle() {
        let mut all = Vec::new();
        for u in 0..20 {
            for _ in 0..(1 + u % 3) {
                all.push(SequenceSample::padding(&format!("u{u}"), 2, 2));
            }
        }
        let s = split_dataset(all, 3).unwrap();
        for t in &s.train {
            assert!(s.test.iter().chain(&s.validation).all(|x| x.user_id != t.user_id));
        }
    }

    #[test]
    fn window_counts() {
        let cfg = SequenceConfig {
            seq_len: 20,
            min_journey_len: 1,
            stride: None,
            channels: 2,
            touch_dim: 0,
            static_dim: 0,
        };
        assert_eq!(window_count(3, &cfg), 1);
        assert_eq!(window_count(40, &cfg), 2);
        assert_eq!(window_count(41, &cfg), 3);
    }

    #[test]
    fn normalization_fit_on_train_only() {
        let journeys: Vec<Journey> = (0..20)
            .map(|u| Journey {
                user_id: format!("u{u:02}"),
                static_features: vec![],
                observations: (0..3)
                    .map(|t| Observation::new(0, vec![], (u * 3 + t) as f64, 0.0, t as i64))
                    .collect(),
            })
            .collect();
        let cfg = SequenceConfig {
            seq_len: 3,
            min_journey_len: 1,
            stride: None,
            channels: 1,
            touch_dim: 0,
            static_dim: 0,
        };
        let prepared = prepare_dataset(&journeys, &cfg, &RewardSpec::new(RewardMode::Continuous), 5).unwrap();
        let train_users: Vec<_> = prepared.split.train.iter().map(|s| &s.user_id).collect();
        let max_train_gain = journeys
            .iter()
            .filter(|j| train_users.contains(&&j.user_id))
            .flat_map(|j| j.observations.iter().map(|o| o.gain))
            .fold(f64::MIN, f64::max);
        assert_eq!(prepared.reward_spec.norm_max, Some(max_train_gain));
        for s in prepared.split.validation.iter().chain(&prepared.split.test) {
            assert!(s.reward_labels.iter().all(|r| (0.0..=1.0).contains(r)));
        }
    }
}
