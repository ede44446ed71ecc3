//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain value (shape + row-major buffer). Differentiable
//! computation happens on a [`Graph`], which records every operation in
//! execution order and replays the record backwards in [`Graph::backward`].

pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod graph;
pub mod optim;

pub use graph::{BatchStats, Gradients, Graph, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dimensions of a rank-4 NCHW tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::RankMismatch {
                op,
                expected: 4,
                found: self.rank(),
            }),
        }
    }

    pub(crate) fn expect_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.rank() != expected.len() {
            return Err(Error::RankMismatch {
                op,
                expected: expected.len(),
                found: self.rank(),
            });
        }
        for (axis, (&e, &f)) in expected.iter().zip(&self.shape).enumerate() {
            if e != f {
                return Err(Error::ShapeMismatch {
                    op,
                    axis,
                    expected: e,
                    found: f,
                });
            }
        }
        Ok(())
    }

    /// Slice of batch elements `[start, start + len)` along axis 0.
    pub fn batch_slice(&self, start: usize, len: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor {
            shape,
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            t.expect_shape("stack", first.shape())?;
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        Tensor::new(shape, data)
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
