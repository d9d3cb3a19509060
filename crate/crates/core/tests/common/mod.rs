#![allow(dead_code)]

use mtorl_core::data::SequenceSample;
use mtorl_core::model::{ModelConfig, RewardHead};
use mtorl_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(hidden: usize, fused_dim: usize, seq_len: usize, channels: usize) -> ModelConfig {
    ModelConfig {
        hidden,
        fused_dim,
        seq_len,
        channels,
        dropout: 0.0,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Random fully valid samples; `padded_prefix` leading steps are masked.
pub fn random_samples(
    count: usize,
    fused_dim: usize,
    seq_len: usize,
    channels: usize,
    padded_prefix: usize,
    head: RewardHead,
    seed: u64,
) -> Vec<SequenceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut s = SequenceSample::padding(&format!("u{i}"), fused_dim, seq_len);
            let values = (0..fused_dim * seq_len)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            s.fused_inputs = Tensor::new(vec![fused_dim, seq_len], values).unwrap();
            for t in 0..seq_len {
                s.valid_mask[t] = t >= padded_prefix;
                s.action_labels[t] = rng.random_range(0..channels);
                s.reward_labels[t] = match head {
                    RewardHead::Sigmoid => f64::from(rng.random_bool(0.5)),
                    RewardHead::Bounded => rng.random_range(0.0..1.0),
                    RewardHead::Softmax => rng.random_range(0..2) as f64,
                };
            }
            s
        })
        .collect()
}
