use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

/// All named weights of the network.
pub type ModelParams = ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Gaussian,
    Zeros,
    Ones,
    /// Weight-norm scale initialised to the norm of its direction rows.
    RowNorm,
}

pub mod names {
    pub const EMBED: &str = "embed.w";
    pub const STATE_W: &str = "state.w";
    pub const STATE_B: &str = "state.b";
    pub const ATTN_Q: &str = "attn.q";
    pub const ATTN_K: &str = "attn.k";
    pub const ATTN_V: &str = "attn.v";
    pub const ACTION_W: &str = "action.w";
    pub const ACTION_B: &str = "action.b";
    pub const REWARD_OUT_W: &str = "reward.out.w";
    pub const REWARD_OUT_B: &str = "reward.out.b";

    pub fn tcn_kernel(l: usize) -> String {
        format!("tcn.{l}.w")
    }
    pub fn tcn_direction(l: usize) -> String {
        format!("tcn.{l}.v")
    }
    pub fn tcn_scale(l: usize) -> String {
        format!("tcn.{l}.g")
    }
    pub fn block_w(l: usize) -> String {
        format!("block.{l}.w")
    }
    pub fn block_b(l: usize) -> String {
        format!("block.{l}.b")
    }
    pub fn block_ln_gain(l: usize) -> String {
        format!("block.{l}.ln_gain")
    }
    pub fn block_ln_bias(l: usize) -> String {
        format!("block.{l}.ln_bias")
    }
    pub fn reward_w(l: usize) -> String {
        format!("reward.{l}.w")
    }
    pub fn reward_b(l: usize) -> String {
        format!("reward.{l}.b")
    }
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden;
    let nb = cfg.bias_cols();
    let mut out = vec![(names::EMBED.to_string(), vec![d, cfg.fused_dim], Init::Gaussian)];
    if cfg.ablation.causal_state {
        for l in 0..cfg.tcn_layers() {
            let kshape = vec![d, d, cfg.kernel_size];
            if cfg.weight_norm {
                out.push((names::tcn_direction(l), kshape, Init::Gaussian));
                out.push((names::tcn_scale(l), vec![d], Init::RowNorm));
            } else {
                out.push((names::tcn_kernel(l), kshape, Init::Gaussian));
            }
        }
        out.push((names::STATE_W.into(), vec![d, d], Init::Gaussian));
        out.push((names::STATE_B.into(), vec![d, nb], Init::Zeros));
    }
    if cfg.ablation.causal_attention {
        for name in [names::ATTN_Q, names::ATTN_K, names::ATTN_V] {
            out.push((name.into(), vec![d, d], Init::Gaussian));
        }
        for l in 0..cfg.attention_layers {
            out.push((names::block_w(l), vec![d, d], Init::Gaussian));
            out.push((names::block_b(l), vec![d, nb], Init::Zeros));
            if cfg.ablation.add_norm {
                out.push((names::block_ln_gain(l), vec![d], Init::Ones));
                out.push((names::block_ln_bias(l), vec![d], Init::Zeros));
            }
        }
    }
    out.push((names::ACTION_W.into(), vec![cfg.channels, d], Init::Gaussian));
    out.push((names::ACTION_B.into(), vec![cfg.channels, nb], Init::Zeros));
    for l in 0..cfg.reward_layers {
        out.push((names::reward_w(l), vec![d, d], Init::Gaussian));
        out.push((names::reward_b(l), vec![d, nb], Init::Zeros));
    }
    let rw = cfg.reward_width();
    out.push((names::REWARD_OUT_W.into(), vec![rw, d], Init::Gaussian));
    out.push((names::REWARD_OUT_B.into(), vec![rw, nb], Init::Zeros));
    out
}

/// Name and shape of every tensor the configuration requires.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Zero-mean Gaussian weights (std `init_std`), zero biases, unit layer-norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut params = ParamSet::new();
    let entries = layout(cfg);
    for (name, shape, init) in &entries {
        let tensor = match init {
            Init::Gaussian => {
                let len = shape.iter().product();
                Tensor::new(shape.clone(), (0..len).map(|_| normal.sample(&mut rng)).collect())?
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, 1.0),
            Init::RowNorm => Tensor::zeros(shape),
        };
        params.insert(name.clone(), tensor);
    }
    for (name, _, init) in &entries {
        if *init == Init::RowNorm {
            let layer = name
                .strip_prefix("tcn.")
                .and_then(|s| s.strip_suffix(".g"))
                .unwrap();
            let direction = params.get(&format!("tcn.{layer}.v")).unwrap();
            let width = direction.len() / direction.rows();
            let norms: Vec<f64> = direction
                .values()
                .chunks(width)
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            params.insert(name.clone(), Tensor::new(vec![norms.len()], norms)?);
        }
    }
    Ok(params)
}

/// Checks that `params` holds exactly the tensors `cfg` requires.
pub fn validate_params(cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let expected = expected_shapes(cfg);
    for (name, shape) in &expected {
        match params.get(name) {
            None => return Err(Error::Shape(format!("missing tensor {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {:?}, configuration expects {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.iter().any(|(e, _)| e == *n)) {
        return Err(Error::Shape(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: 4,
            fused_dim: 5,
            seq_len: 3,
            channels: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_matches_layout_and_is_seeded() {
        let cfg = small();
        let a = init_params(&cfg, 1).unwrap();
        validate_params(&cfg, &a).unwrap();
        assert_eq!(a, init_params(&cfg, 1).unwrap());
        assert_ne!(a, init_params(&cfg, 2).unwrap());
        assert_eq!(a.get(names::STATE_B).unwrap().shape(), &[4, 3]);
        assert_eq!(a.get(names::ACTION_W).unwrap().shape(), &[2, 4]);
    }

    #[test]
    fn weight_norm_scale_starts_at_row_norm() {
        let p = init_params(&small(), 3).unwrap();
        let v = p.get("tcn.0.v").unwrap();
        let g = p.get("tcn.0.g").unwrap();
        let row0: f64 = v.values()[..12].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_eq!(g.values()[0], row0);
    }

    #[test]
    fn ablations_drop_unused_tensors() {
        let cfg = ModelConfig {
            ablation: Ablation {
                causal_state: false,
                causal_attention: false,
                add_norm: true,
            },
            per_position_bias: false,
            ..small()
        };
        let p = init_params(&cfg, 0).unwrap();
        assert!(!p.contains(names::STATE_W) && !p.contains(names::ATTN_Q));
        assert_eq!(p.get(names::ACTION_B).unwrap().shape(), &[2, 1]);
    }

    #[test]
    fn validate_names_offending_tensor() {
        let cfg = small();
        let mut p = init_params(&cfg, 0).unwrap();
        p.insert(names::ATTN_K, Tensor::zeros(&[4, 5]));
        let err = validate_params(&cfg, &p).unwrap_err().to_string();
        assert!(err.contains("attn.k"), "{err}");
    }
}
