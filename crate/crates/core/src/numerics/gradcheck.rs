//! Central-difference gradient checking.

use super::params::ParamSet;
use crate::error::{Error, Result};

/// A scalar objective over a [`ParamSet`] with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamSet) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)>;

    /// Additive components whose sum is [`Objective::value`].
    ///
    /// Differencing each component separately avoids quantizing small
    /// changes to the rounding step of a large total.
    fn value_parts(&self, params: &ParamSet) -> Result<Vec<f64>> {
        Ok(vec![self.value(params)?])
    }
}

impl<V, G> Objective for (V, G)
where
    V: Fn(&ParamSet) -> Result<f64>,
    G: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
{
    fn value(&self, params: &ParamSet) -> Result<f64> {
        (self.0)(params)
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        (self.1)(params)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many entries per tensor (evenly strided); `None` checks all.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Max over checked entries of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    objective: &impl Objective,
    params: &ParamSet,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&options.eps) {
        return Err(Error::Config(format!(
            "finite-difference eps {} outside [1e-6, 1e-3]",
            options.eps
        )));
    }
    let (_, analytic) = objective.value_and_grad(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).map_or(0, |t| t.len());
        let stride = match options.max_per_tensor {
            Some(cap) if cap > 0 && len > cap => len.div_ceil(cap),
            _ => 1,
        };
        for idx in (0..len).step_by(stride) {
            let original = params.get(&name).unwrap().values()[idx];
            let mut eval_at = |x: f64| -> Result<Vec<f64>> {
                probe.get_mut(&name).unwrap().values_mut()[idx] = x;
                let parts = objective.value_parts(&probe)?;
                if parts.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "loss at perturbed parameter {name}[{idx}]"
                    )));
                }
                Ok(parts)
            };
            let plus = eval_at(original + options.eps)?;
            let minus = eval_at(original - options.eps)?;
            probe.get_mut(&name).unwrap().values_mut()[idx] = original;
            let numeric = plus
                .iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * options.eps))
                .sum::<f64>();
            let exact = analytic.get(&name).map_or(0.0, |g| g.values()[idx]);
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
