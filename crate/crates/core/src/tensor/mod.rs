//! Dense row-major f64 tensors and a define-by-run reverse-mode tape.
//!
//! The [`Tensor`] is the universal numeric carrier: activations, parameters,
//! images and gradients all live here. A [`Graph`] records every operation
//! applied under it; [`Graph::backward`] walks the record in reverse to fill
//! the `grad` slot of every `requires_grad` tensor.
//!
//! Reductions accumulate in a fixed sequential row-major order, so identical
//! inputs produce bitwise-identical outputs across runs and thread counts.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::grad_check;
pub use graph::{Graph, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} values, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape must have positive dims, got {shape:?}")]
    NonPositiveDim { shape: Vec<usize> },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
        padding: usize,
    },
    #[error("max_pool2d: window {window} exceeds spatial dims {h}x{w}")]
    WindowTooLarge { window: usize, h: usize, w: usize },
    #[error("{op}: stride must be positive")]
    ZeroStride { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("cross_entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cross_entropy: {labels} labels for a batch of {batch}")]
    LabelCountMismatch { labels: usize, batch: usize },
    #[error("log: input contains a non-positive value ({value})")]
    NonPositiveLog { value: f64 },
    #[error("gather: index {index} out of bounds for {len} elements")]
    GatherOutOfBounds { index: usize, len: usize },
    #[error("grad_check: eps must be positive, got {eps}")]
    NonPositiveEps { eps: f64 },
}

/// An n-dimensional f64 array in row-major order with an optional gradient
/// slot. Values are immutable after construction; only `grad` is written
/// later, by [`Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::NonPositiveDim { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar shape is valid")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat index of the row-major maximum (first occurrence on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}
