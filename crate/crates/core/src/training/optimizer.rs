use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("train.lr must be finite and ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam eps must be > 0 and weight_decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update. Parameters without a gradient entry see a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let g = grads.get(name).map(|g| g.values());
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                let mi = &mut m.values_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.values_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (m.values()[i] / bc1) / ((v.values()[i] / bc2).sqrt() + c.eps);
                let w = &mut p.values_mut()[i];
                *w -= c.lr * (update + c.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p: ParamSet = [("w".to_string(), Tensor::column(vec![1.0, -1.0]).unwrap())]
            .into_iter()
            .collect();
        let g: ParamSet = [("w".to_string(), Tensor::column(vec![3.0, -0.5]).unwrap())]
            .into_iter()
            .collect();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &p,
        );
        adam.step(&mut p, &g);
        let w = p.get("w").unwrap().values();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p: ParamSet = [("w".to_string(), Tensor::column(vec![0.3]).unwrap())]
            .into_iter()
            .collect();
        let before = p.clone();
        let g = p.clone();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                weight_decay: 0.1,
                ..Default::default()
            },
            &p,
        );
        adam.step(&mut p, &g);
        assert_eq!(p, before);
    }
}
