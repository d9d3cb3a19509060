use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            values: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Column vector `[len × 1]`.
    pub fn column(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len(), 1], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent for 2-D use; `1` for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.values[r * cols + c] = v;
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, c)).collect()
    }

    pub fn row_values(&self, r: usize) -> &[f64] {
        let cols = self.cols();
        &self.values[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.values[j * r + i] = self.values[i * c + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Self::zeros(&[n, m]);
        for i in 0..n {
            let a_row = &self.values[i * k..(i + 1) * k];
            let o_row = &mut out.values[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.values[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.values)
    }
}
