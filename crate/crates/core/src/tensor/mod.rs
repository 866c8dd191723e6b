//! Dense row-major tensors and a small reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value: a shape plus a `Vec<f64>`. Differentiable
//! computation happens on a [`Tape`], which records every primitive applied
//! to [`Var`] handles and replays the adjoints in reverse on
//! [`Tape::backward`].

mod conv;
pub mod io;
pub mod gradcheck;
mod tape;

pub use conv::{conv_output_size, Conv2dSpec};
pub use tape::{Tape, Var};

use std::fmt;

use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: dimension `{dim}` is {got}, expected {expected}")]
    Dimension {
        op: &'static str,
        dim: &'static str,
        expected: String,
        got: usize,
    },
    #[error("{op}: rank {got} not supported (expected {expected})")]
    Rank {
        op: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ... ({} values)", self.data.len())?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            data: (0..n).map(f).collect(),
            shape,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: self.shape,
                got: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(op, other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: shape.to_vec(),
                got: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape("dot", other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.expect_shape("axpy", other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape("max_abs_diff", other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| TensorError::Invalid {
            op: "stack",
            reason: "no tensors to stack".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            t.expect_shape("stack", first.shape())?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// The `i`-th slice along the leading axis.
    pub fn select(&self, i: usize) -> Result<Self> {
        let (&n, rest) = self.shape.split_first().ok_or(TensorError::Rank {
            op: "select",
            expected: ">= 1",
            got: 0,
        })?;
        if i >= n {
            return Err(TensorError::Dimension {
                op: "select",
                dim: "index",
                expected: format!("< {n}"),
                got: i,
            });
        }
        let stride: usize = rest.iter().product();
        Ok(Self {
            shape: rest.to_vec(),
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        })
    }

    /// Splits a leading axis into owned slices.
    pub fn unstack(&self) -> Result<Vec<Self>> {
        let n = *self.shape.first().ok_or(TensorError::Rank {
            op: "unstack",
            expected: ">= 1",
            got: 0,
        })?;
        (0..n).map(|i| self.select(i)).collect()
    }

    /// Index of the maximum along the channel axis of a `[C,H,W]` or
    /// `[N,C,H,W]` tensor, one entry per pixel (row-major over N,H,W).
    pub fn argmax_channels(&self) -> Result<Vec<usize>> {
        let (n, c, hw) = nchw_dims("argmax_channels", &self.shape)?;
        let mut out = Vec::with_capacity(n * hw);
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = self.data[base + p];
                for ch in 1..c {
                    let v = self.data[base + ch * hw + p];
                    if v > best_v {
                        best = ch;
                        best_v = v;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Interprets a `[C,H,W]` or `[N,C,H,W]` shape as `(N, C, H*W)`.
pub(crate) fn nchw_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h * w)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(TensorError::Rank {
            op,
            expected: "3 ([C,H,W]) or 4 ([N,C,H,W])",
            got: shape.len(),
        }),
    }
}
