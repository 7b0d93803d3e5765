//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! Values are plain row-major [`Tensor`]s. Differentiable computation happens
//! on a [`Tape`]: every op evaluates eagerly and records itself so that
//! [`Tape::backward`] can replay the chain rule in reverse.
//!
//! Broadcasting is deliberately narrow. A binary op accepts two operands of
//! identical shape, or one operand whose shape (after dropping leading `1`
//! extents) equals the trailing dimensions of the other. A `[1]` scalar
//! therefore broadcasts against anything and a `[n]` bias broadcasts against a
//! `[batch, n]` matrix. Anything else must be reshaped explicitly.

mod archive;
mod optim;
mod store;
mod tape;
pub mod gradcheck;

pub use archive::{read_archive, write_archive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use optim::{clip_grad_norm, Adam};
pub use store::{Bound, ParamId, ParameterStore};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("invalid extents {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values but got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid extents {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([rows, cols], data)
    }

    /// Stacks equally sized rows into a `[rows.len(), width]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::shape(
                    "from_rows",
                    format!("row of length {} among rows of length {width}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::new([rows.len(), width], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.sample(StandardNormal);
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, low: f64, high: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.gen_range(low..high);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects rows `idx` of a `[rows, cols]` view.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::shape("select_rows", format!("row {i} of {}", self.rows())));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new([idx.len(), c], data)
    }

    /// Concatenates `[rows, *]` matrices along the last axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let rows = parts
            .first()
            .map(|t| t.rows())
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if parts.iter().any(|t| t.rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|t| t.shape().to_vec()).collect();
            return Err(Error::shape("concat", format!("row counts differ: {shapes:?}")));
        }
        let width: usize = parts.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for t in parts {
                data.extend_from_slice(t.row(r));
            }
        }
        Self::new([rows, width], data)
    }

    /// Stacks `[rows_i, cols]` matrices vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let cols = parts
            .first()
            .map(|t| t.cols())
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {} vs {cols}", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Self::new([rows, cols], data)
    }
}

/// How the smaller operand of a binary op is tiled over the larger one.
pub(crate) fn broadcast_period(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    fn strip(s: &[usize]) -> &[usize] {
        let lead = s.iter().take_while(|&&d| d == 1).count();
        &s[lead.min(s.len().saturating_sub(1))..]
    }
    let nb: usize = b.iter().product();
    if a == b || nb == 1 {
        return Ok(nb);
    }
    let tail = strip(b);
    if tail.len() <= a.len() && a[a.len() - tail.len()..] == *tail {
        return Ok(nb);
    }
    Err(Error::shape(op, format!("cannot broadcast {b:?} against {a:?}")))
}
