//! N-dimensional `f64` tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value: a [`Shape`] plus a row-major buffer. Gradient
//! tracking lives on the [`Tape`]: values enter it as leaves ([`Tape::leaf`])
//! or constants, every differentiable op appends a node, and
//! [`Tape::backward`] replays the nodes in reverse to fill leaf gradients.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{finite_difference, grad_check, relative_error, GradCheckReport};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Ordered list of dimensions, every one at least 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                dims,
                reason: "at least one dimension is required".into(),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                dims,
                reason: "every dimension must be >= 1".into(),
            });
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(outer, axis, inner)` extents around `axis`.
    pub(crate) fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.0[..axis].iter().product();
        let inner = self.0[axis + 1..].iter().product();
        (outer, self.0[axis], inner)
    }

    pub(crate) fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.ndim() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.0),
            ));
        }
        Ok(())
    }

    /// Unpacks a 4-D `[B, C, H, W]` shape.
    pub fn bchw(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.0.as_slice() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::invalid(
                op,
                format!("expected a 4-D [B, C, H, W] tensor, got {:?}", self.0),
            )),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, data)
    }

    pub fn from_shape(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape {
                dims: shape.0,
                reason: format!("buffer has {} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor of shape {} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Same buffer, new shape with equal element count.
    pub fn reshaped(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.0,
                rhs: shape.0,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Samples `[b]` of a batched tensor, as a tensor with leading dim 1.
    pub fn batch_item(&self, b: usize) -> Result<Tensor> {
        let dims = self.dims();
        if b >= dims[0] {
            return Err(Error::invalid(
                "batch_item",
                format!("index {b} out of range for batch {}", dims[0]),
            ));
        }
        let per = self.numel() / dims[0];
        let mut out_dims = dims.to_vec();
        out_dims[0] = 1;
        Tensor::new(out_dims, self.data[b * per..(b + 1) * per].to_vec())
    }

    /// Stacks equally shaped tensors with leading dim 1 along axis 0.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.dims()[1..] != first.dims()[1..] {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    lhs: first.dims().to_vec(),
                    rhs: t.dims().to_vec(),
                });
            }
            batch += t.dims()[0];
            data.extend_from_slice(t.data());
        }
        let mut dims = first.dims().to_vec();
        dims[0] = batch;
        Tensor::new(dims, data)
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dims_are_rejected() {
        assert!(Shape::new(vec![2, 0, 3]).is_err());
        assert!(Shape::new(Vec::<usize>::new()).is_err());
    }

    #[test]
    fn buffer_length_must_match_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn stack_and_split_batches() {
        let a = Tensor::full(vec![1, 2, 2], 1.0).unwrap();
        let b = Tensor::full(vec![1, 2, 2], 2.0).unwrap();
        let s = Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.dims(), &[2, 2, 2]);
        assert_eq!(s.batch_item(1).unwrap(), b);
        assert_eq!(s.batch_item(0).unwrap(), a);
    }
}

#[cfg(test)]
mod op_tests;
