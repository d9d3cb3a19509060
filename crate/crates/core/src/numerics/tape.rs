//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every node records the primitive that produced it, so a tape can be
//! replayed from its leaves and differentiated with respect to named
//! parameter leaves.

use std::collections::BTreeMap;

use super::ops::{self, AttentionMask};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf(Option<String>),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Bias `[r × n]` or `[r × 1]` broadcast over columns.
    AddBias(Var, Var),
    Affine(Var, f64, f64),
    MulConst(Var, Tensor),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    UnitSoftsign(Var),
    SoftmaxRows(Var),
    MaskedSoftmax(Var, AttentionMask),
    LayerNorm(Var, Var, Var, f64),
    Conv(Var, Var, usize),
    WeightNorm(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    LnFloor(Var, f64),
    LogSigmoid(Var),
    MaxConst(Var, f64),
    Square(Var),
    Dot(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Named leaf that receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.push(Op::Leaf(Some(name.to_string())), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf(None), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = eval(&Op::Add(a, b), &self.nodes)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = eval(&Op::Sub(a, b), &self.nodes)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let op = Op::AddBias(x, bias);
        let v = eval(&op, &self.nodes)?;
        Ok(self.push(op, v))
    }

    /// `a · x + b`, elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.value(x).map(|e| a * e + b);
        self.push(Op::Affine(x, a, b), v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn mul_const(&mut self, x: Var, factor: Tensor) -> Result<Var> {
        let op = Op::MulConst(x, factor);
        let v = eval(&op, &self.nodes)?;
        Ok(self.push(op, v))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = ops::leaky_relu(self.value(x), slope);
        self.push(Op::LeakyRelu(x, slope), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::sigmoid_scalar);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn unit_softsign(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::unit_softsign_scalar);
        self.push(Op::UnitSoftsign(x), v)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = ops::softmax_rows(self.value(x));
        self.push(Op::SoftmaxRows(x), v)
    }

    pub fn masked_softmax(&mut self, x: Var, mask: AttentionMask) -> Result<Var> {
        let v = ops::masked_softmax(self.value(x), &mask)?;
        Ok(self.push(Op::MaskedSoftmax(x, mask), v))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(Op::LayerNorm(x, gain, bias, eps), v))
    }

    pub fn dilated_causal_conv1d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let v = ops::dilated_causal_conv1d(self.value(x), self.value(kernel), dilation)?;
        Ok(self.push(Op::Conv(x, kernel, dilation), v))
    }

    pub fn weight_norm(&mut self, direction: Var, scale: Var) -> Result<Var> {
        let v = ops::weight_norm(self.value(direction), self.value(scale))?;
        Ok(self.push(Op::WeightNorm(direction, scale), v))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let op = Op::SliceCols(x, start, end);
        let v = eval(&op, &self.nodes)?;
        Ok(self.push(op, v))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let op = Op::ConcatCols(parts);
        let v = eval(&op, &self.nodes)?;
        Ok(self.push(op, v))
    }

    /// Picks flat entries into a column vector.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let op = Op::Gather(x, indices);
        let v = eval(&op, &self.nodes)?;
        Ok(self.push(op, v))
    }

    /// `ln(max(x, floor))`; entries below the floor get zero gradient.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let v = self.value(x).map(|e| e.max(floor).ln());
        self.push(Op::LnFloor(x, floor), v)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::log_sigmoid_scalar);
        self.push(Op::LogSigmoid(x), v)
    }

    /// `max(x, c)` elementwise; entries at or below `c` get zero gradient.
    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e.max(c));
        self.push(Op::MaxConst(x, c), v)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(Op::Square(x), v)
    }

    /// Scalar `Σ weights_i · x_i`.
    pub fn dot(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let op = Op::Dot(x, weights);
        let v = eval(&op, &self.nodes)?;
        Ok(self.push(op, v))
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut rebuilt: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf(_) => node.value.clone(),
                op => eval(op, &rebuilt)?,
            };
            rebuilt.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(rebuilt.into_iter().map(|n| n.value).collect())
    }

    /// Gradient of scalar `loss` with respect to every named leaf.
    ///
    /// Leaves registered more than once under the same name accumulate.
    pub fn backward(&self, loss: Var) -> Result<ParamSet> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, d: Tensor| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf(Some(name)) => match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                },
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    send(*a, g.matmul(&bv.transpose())?);
                    send(*b, av.transpose().matmul(&g)?);
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|e| -e));
                    send(*a, g);
                }
                Op::AddBias(x, b) => {
                    let bias = self.value(*b);
                    let db = if bias.cols() == g.cols() {
                        g.clone()
                    } else {
                        let mut db = Tensor::zeros(bias.shape());
                        for r in 0..g.rows() {
                            db.values_mut()[r] = g.row_values(r).iter().sum();
                        }
                        db
                    };
                    send(*b, db);
                    send(*x, g);
                }
                Op::Affine(x, a, _) => send(*x, g.map(|e| a * e)),
                Op::MulConst(x, factor) => {
                    let mut d = g;
                    for (e, f) in d.values_mut().iter_mut().zip(factor.values()) {
                        *e *= f;
                    }
                    send(*x, d);
                }
                Op::LeakyRelu(x, slope) => send(*x, ops::leaky_relu_backward(self.value(*x), &g, *slope)),
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let mut d = g;
                    for (e, s) in d.values_mut().iter_mut().zip(y.values()) {
                        *e *= s * (1.0 - s);
                    }
                    send(*x, d);
                }
                Op::UnitSoftsign(x) => {
                    let mut d = g;
                    for (e, xv) in d.values_mut().iter_mut().zip(self.value(*x).values()) {
                        *e *= ops::unit_softsign_derivative(*xv);
                    }
                    send(*x, d);
                }
                Op::SoftmaxRows(x) | Op::MaskedSoftmax(x, _) => {
                    send(*x, ops::softmax_rows_backward(&node.value, &g))
                }
                Op::LayerNorm(x, gain, bias, eps) => {
                    let (dx, dgain, dbias) =
                        ops::layer_norm_backward(self.value(*x), self.value(*gain), *eps, &g);
                    send(*x, dx);
                    send(*gain, dgain);
                    send(*bias, dbias);
                }
                Op::Conv(x, k, dilation) => {
                    let (dx, dk) =
                        ops::dilated_causal_conv1d_backward(self.value(*x), self.value(*k), *dilation, &g);
                    send(*x, dx);
                    send(*k, dk);
                }
                Op::WeightNorm(v, s) => {
                    let (dv, ds) = ops::weight_norm_backward(self.value(*v), self.value(*s), &g);
                    send(*v, dv);
                    send(*s, ds);
                }
                Op::SliceCols(x, start, end) => {
                    let src = self.value(*x);
                    let mut d = Tensor::zeros(src.shape());
                    let width = end - start;
                    for r in 0..src.rows() {
                        for c in 0..width {
                            d.set(r, start + c, g.get(r, c));
                        }
                    }
                    send(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let mut d = Tensor::zeros(pv.shape());
                        for r in 0..pv.rows() {
                            for c in 0..pv.cols() {
                                d.set(r, c, g.get(r, offset + c));
                            }
                        }
                        offset += pv.cols();
                        send(*p, d);
                    }
                }
                Op::Gather(x, indices) => {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    for (k, &i) in indices.iter().enumerate() {
                        d.values_mut()[i] += g.values()[k];
                    }
                    send(*x, d);
                }
                Op::LnFloor(x, floor) => {
                    let mut d = g;
                    for (e, xv) in d.values_mut().iter_mut().zip(self.value(*x).values()) {
                        *e = if *xv > *floor { *e / xv } else { 0.0 };
                    }
                    send(*x, d);
                }
                Op::MaxConst(x, c) => {
                    let mut d = g;
                    for (e, xv) in d.values_mut().iter_mut().zip(self.value(*x).values()) {
                        if *xv <= *c {
                            *e = 0.0;
                        }
                    }
                    send(*x, d);
                }
                Op::LogSigmoid(x) => {
                    let mut d = g;
                    for (e, xv) in d.values_mut().iter_mut().zip(self.value(*x).values()) {
                        *e *= ops::sigmoid_scalar(-xv);
                    }
                    send(*x, d);
                }
                Op::Square(x) => {
                    let mut d = g;
                    for (e, xv) in d.values_mut().iter_mut().zip(self.value(*x).values()) {
                        *e *= 2.0 * xv;
                    }
                    send(*x, d);
                }
                Op::Dot(x, weights) => {
                    let s = g.values()[0];
                    let xv = self.value(*x);
                    let d = Tensor::new(xv.shape().to_vec(), weights.iter().map(|w| w * s).collect())?;
                    send(*x, d);
                }
            }
        }
        Ok(ParamSet::from_map(out))
    }
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: &Var| &nodes[v.0].value;
    Ok(match op {
        Op::Leaf(_) => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => val(a).matmul(val(b))?,
        Op::Transpose(a) => val(a).transpose(),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (x, y) = (val(a), val(b));
            if x.shape() != y.shape() {
                return Err(Error::Shape(format!(
                    "elementwise op on {:?} and {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let mut out = x.clone();
            for (o, e) in out.values_mut().iter_mut().zip(y.values()) {
                *o += sign * e;
            }
            out
        }
        Op::AddBias(x, b) => {
            let (xv, bv) = (val(x), val(b));
            if bv.rows() != xv.rows() || (bv.cols() != 1 && bv.cols() != xv.cols()) {
                return Err(Error::Shape(format!(
                    "bias {:?} does not fit {:?}",
                    bv.shape(),
                    xv.shape()
                )));
            }
            let mut out = xv.clone();
            let per_column = bv.cols() != 1;
            for r in 0..xv.rows() {
                for c in 0..xv.cols() {
                    let b = if per_column { bv.get(r, c) } else { bv.values()[r] };
                    out.set(r, c, xv.get(r, c) + b);
                }
            }
            out
        }
        Op::Affine(x, a, b) => val(x).map(|e| a * e + b),
        Op::MulConst(x, factor) => {
            let xv = val(x);
            if xv.shape() != factor.shape() {
                return Err(Error::Shape("mul_const shape mismatch".into()));
            }
            let mut out = xv.clone();
            for (o, f) in out.values_mut().iter_mut().zip(factor.values()) {
                *o *= f;
            }
            out
        }
        Op::LeakyRelu(x, slope) => ops::leaky_relu(val(x), *slope),
        Op::Sigmoid(x) => val(x).map(ops::sigmoid_scalar),
        Op::UnitSoftsign(x) => val(x).map(ops::unit_softsign_scalar),
        Op::SoftmaxRows(x) => ops::softmax_rows(val(x)),
        Op::MaskedSoftmax(x, mask) => ops::masked_softmax(val(x), mask)?,
        Op::LayerNorm(x, g, b, eps) => ops::layer_norm(val(x), val(g), val(b), *eps)?,
        Op::Conv(x, k, d) => ops::dilated_causal_conv1d(val(x), val(k), *d)?,
        Op::WeightNorm(v, s) => ops::weight_norm(val(v), val(s))?,
        Op::SliceCols(x, start, end) => {
            let xv = val(x);
            if start >= end || *end > xv.cols() {
                return Err(Error::Shape(format!(
                    "column slice {start}..{end} of {:?}",
                    xv.shape()
                )));
            }
            let width = end - start;
            let mut out = Tensor::zeros(&[xv.rows(), width]);
            for r in 0..xv.rows() {
                for c in 0..width {
                    out.set(r, c, xv.get(r, start + c));
                }
            }
            out
        }
        Op::ConcatCols(parts) => {
            let rows = parts
                .first()
                .map(|p| val(p).rows())
                .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
            if parts.iter().any(|p| val(p).rows() != rows) {
                return Err(Error::Shape("concat parts differ in rows".into()));
            }
            let total: usize = parts.iter().map(|p| val(p).cols()).sum();
            let mut out = Tensor::zeros(&[rows, total]);
            let mut offset = 0;
            for p in parts {
                let pv = val(p);
                for r in 0..rows {
                    for c in 0..pv.cols() {
                        out.set(r, offset + c, pv.get(r, c));
                    }
                }
                offset += pv.cols();
            }
            out
        }
        Op::Gather(x, indices) => {
            let xv = val(x);
            if indices.is_empty() {
                return Err(Error::Shape("gather of zero indices".into()));
            }
            let mut picked = Vec::with_capacity(indices.len());
            for &i in indices {
                picked.push(
                    *xv.values()
                        .get(i)
                        .ok_or_else(|| Error::Shape(format!("gather index {i} out of {}", xv.len())))?,
                );
            }
            Tensor::column(picked)?
        }
        Op::LnFloor(x, floor) => val(x).map(|e| e.max(*floor).ln()),
        Op::LogSigmoid(x) => val(x).map(ops::log_sigmoid_scalar),
        Op::MaxConst(x, c) => val(x).map(|e| e.max(*c)),
        Op::Square(x) => val(x).map(|e| e * e),
        Op::Dot(x, weights) => {
            let xv = val(x);
            if xv.len() != weights.len() {
                return Err(Error::Shape(format!(
                    "dot of {} values with {} weights",
                    xv.len(),
                    weights.len()
                )));
            }
            Tensor::scalar(xv.values().iter().zip(weights).map(|(a, b)| a * b).sum())
        }
    })
}
