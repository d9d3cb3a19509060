//! Forward kernels and their vector-Jacobian products.
//!
//! Matrices are `[rows × cols]`; sequence tensors are `[features × positions]`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

/// Which key positions each query position may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Lower-triangular mask: position `t` sees `0..=t`.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for t in 0..n {
            for s in 0..=t {
                allowed[t * n + s] = true;
            }
        }
        Self { n, allowed }
    }

    /// Causal mask that also hides invalid (padded) keys. A position always sees itself.
    pub fn causal_with_padding(valid: &[bool]) -> Self {
        let n = valid.len();
        let mut allowed = vec![false; n * n];
        for t in 0..n {
            for s in 0..=t {
                allowed[t * n + s] = valid[s] || s == t;
            }
        }
        Self { n, allowed }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..n * n).map(|i| f(i / n, i % n)).collect();
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n + key]
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, grad: &Tensor, slope: f64) -> Tensor {
    let mut out = grad.clone();
    for (g, &v) in out.values_mut().iter_mut().zip(x.values()) {
        if v < 0.0 {
            *g *= slope;
        }
    }
    out
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Softsign squashed into `(0, 1)`: `½ (1 + x / (1 + |x|))`.
pub fn unit_softsign_scalar(x: f64) -> f64 {
    0.5 * (1.0 + x / (1.0 + x.abs()))
}

pub fn unit_softsign_derivative(x: f64) -> f64 {
    let d = 1.0 + x.abs();
    0.5 / (d * d)
}

/// Row-wise softmax restricted to `mask`; masked entries are exactly zero.
pub fn masked_softmax(logits: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let n = logits.rows();
    if logits.shape().len() != 2 || logits.cols() != n {
        return Err(Error::Shape(format!(
            "masked softmax needs a square matrix, got {:?}",
            logits.shape()
        )));
    }
    if mask.len() != n {
        return Err(Error::Shape(format!(
            "mask size {} does not match logits {n}",
            mask.len()
        )));
    }
    let mut out = Tensor::zeros(&[n, n]);
    for t in 0..n {
        let row = logits.row_values(t);
        if !(0..n).any(|s| mask.allows(t, s)) {
            return Err(Error::Shape(format!("row {t} is fully masked")));
        }
        let max = (0..n)
            .filter(|&s| mask.allows(t, s))
            .map(|s| row[s])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (s, &v) in row.iter().enumerate() {
            if mask.allows(t, s) {
                let e = (v - max).exp();
                out.set(t, s, e);
                total += e;
            }
        }
        for s in 0..n {
            if mask.allows(t, s) {
                out.set(t, s, out.get(t, s) / total);
            }
        }
    }
    Ok(out)
}

/// Plain row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = logits.row_values(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / total);
        }
    }
    out
}

/// VJP shared by masked and plain softmax: `dx = y ⊙ (dy − Σ dy·y)` per row.
pub fn softmax_rows_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let (r, c) = (y.rows(), y.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let yr = y.row_values(i);
        let gr = grad.row_values(i);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out.set(i, j, yr[j] * (gr[j] - dot));
        }
    }
    out
}

/// Causal 1-D convolution over positions with left zero-padding.
///
/// `input` is `[d_in × n]`, `kernel` is `[d_out × d_in × k]` where tap `j`
/// multiplies the input `dilation · j` positions in the past.
pub fn dilated_causal_conv1d(input: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    let (d_in, n) = (input.rows(), input.cols());
    let (d_out, k_in, taps) = conv_kernel_dims(kernel)?;
    if dilation == 0 {
        return Err(Error::Shape("dilation must be at least 1".into()));
    }
    if k_in != d_in {
        return Err(Error::Shape(format!(
            "kernel expects {k_in} input channels, input has {d_in}"
        )));
    }
    let kv = kernel.values();
    let xv = input.values();
    let mut out = Tensor::zeros(&[d_out, n]);
    let ov = out.values_mut();
    for o in 0..d_out {
        for i in 0..d_in {
            for j in 0..taps {
                let w = kv[(o * d_in + i) * taps + j];
                let lag = dilation * j;
                if w == 0.0 || lag >= n {
                    continue;
                }
                for t in lag..n {
                    ov[o * n + t] += w * xv[i * n + t - lag];
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_kernel)` for [`dilated_causal_conv1d`].
pub fn dilated_causal_conv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    grad: &Tensor,
) -> (Tensor, Tensor) {
    let (d_in, n) = (input.rows(), input.cols());
    let (d_out, _, taps) = conv_kernel_dims(kernel).expect("kernel validated in forward");
    let kv = kernel.values();
    let xv = input.values();
    let gv = grad.values();
    let mut dx = Tensor::zeros(input.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    {
        let dxv = dx.values_mut();
        for o in 0..d_out {
            for i in 0..d_in {
                for j in 0..taps {
                    let w = kv[(o * d_in + i) * taps + j];
                    let lag = dilation * j;
                    if lag >= n {
                        continue;
                    }
                    for t in lag..n {
                        dxv[i * n + t - lag] += gv[o * n + t] * w;
                    }
                }
            }
        }
    }
    let dkv = dk.values_mut();
    for o in 0..d_out {
        for i in 0..d_in {
            for j in 0..taps {
                let lag = dilation * j;
                if lag >= n {
                    continue;
                }
                let mut acc = 0.0;
                for t in lag..n {
                    acc += gv[o * n + t] * xv[i * n + t - lag];
                }
                dkv[(o * d_in + i) * taps + j] = acc;
            }
        }
    }
    (dx, dk)
}

fn conv_kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize)> {
    match *kernel.shape() {
        [o, i, k] => Ok((o, i, k)),
        [o, i] => Ok((o, i, 1)),
        ref s => Err(Error::Shape(format!("conv kernel must be 3-D, got {s:?}"))),
    }
}

/// Weight normalization of a kernel: row `o` becomes `scale[o] · v[o] / ‖v[o]‖`.
pub fn weight_norm(direction: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let rows = direction.rows();
    if scale.len() != rows {
        return Err(Error::Shape(format!(
            "weight-norm scale has {} entries for {rows} rows",
            scale.len()
        )));
    }
    let width = direction.len() / rows;
    let mut out = direction.clone();
    for (o, chunk) in out.values_mut().chunks_mut(width).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let factor = scale.values()[o] / norm;
        chunk.iter_mut().for_each(|v| *v *= factor);
    }
    Ok(out)
}

/// Returns `(d_direction, d_scale)`.
pub fn weight_norm_backward(direction: &Tensor, scale: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let rows = direction.rows();
    let width = direction.len() / rows;
    let mut dv = Tensor::zeros(direction.shape());
    let mut dg = Tensor::zeros(scale.shape());
    for o in 0..rows {
        let v = &direction.values()[o * width..(o + 1) * width];
        let g = &grad.values()[o * width..(o + 1) * width];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let proj: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / norm;
        dg.values_mut()[o] = proj;
        let s = scale.values()[o];
        for (idx, (&vi, &gi)) in v.iter().zip(g).enumerate() {
            dv.values_mut()[o * width + idx] = s / norm * (gi - proj * vi / norm);
        }
    }
    (dv, dg)
}

/// Per-position normalization over the feature axis of `x [d × n]`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (d, n) = (x.rows(), x.cols());
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layer norm over {d} features got gain {:?} bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[d, n]);
    for t in 0..n {
        let (mean, inv_std) = column_stats(x, t, eps);
        for r in 0..d {
            let xhat = (x.get(r, t) - mean) * inv_std;
            out.set(r, t, gain.values()[r] * xhat + bias.values()[r]);
        }
    }
    Ok(out)
}

/// Returns `(d_x, d_gain, d_bias)`.
pub fn layer_norm_backward(x: &Tensor, gain: &Tensor, eps: f64, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (d, n) = (x.rows(), x.cols());
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(gain.shape());
    let mut dbias = Tensor::zeros(gain.shape());
    let df = d as f64;
    for t in 0..n {
        let (mean, inv_std) = column_stats(x, t, eps);
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for r in 0..d {
            xhat[r] = (x.get(r, t) - mean) * inv_std;
            let g = grad.get(r, t);
            dgain.values_mut()[r] += g * xhat[r];
            dbias.values_mut()[r] += g;
            dxhat[r] = g * gain.values()[r];
        }
        let sum_dxhat: f64 = dxhat.iter().sum();
        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        for r in 0..d {
            let v = inv_std / df * (df * dxhat[r] - sum_dxhat - xhat[r] * sum_dxhat_xhat);
            dx.set(r, t, v);
        }
    }
    (dx, dgain, dbias)
}

fn column_stats(x: &Tensor, t: usize, eps: f64) -> (f64, f64) {
    let d = x.rows();
    let mean = (0..d).map(|r| x.get(r, t)).sum::<f64>() / d as f64;
    let var = (0..d).map(|r| (x.get(r, t) - mean).powi(2)).sum::<f64>() / d as f64;
    (mean, 1.0 / (var + eps).sqrt())
}
