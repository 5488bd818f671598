//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The substrate for every layer, loss, and optimizer in the crate: a
//! [`Tensor`] is a contiguous row-major value, a [`Tape`] records primitive
//! operations during the forward pass and replays them in reverse to
//! accumulate gradients. Training runs at `f32`; gradient checks instantiate
//! the same code at `f64` (see [`gradcheck`]).

mod element;
pub mod gradcheck;
mod kernels;
mod tape;

pub use element::Element;
pub use tape::{Tape, TapeMark, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {} and {}", fmt_shape(lhs), fmt_shape(rhs))]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {} does not hold {len} elements", fmt_shape(shape))]
    ShapeData {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: axis {axis} out of range for rank-{rank} tensor")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: invalid range {start}..{end} on axis of length {len}")]
    InvalidRange {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {}", fmt_shape(shape))]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: zero-size dimension is not allowed")]
    ZeroDim { op: &'static str },
    #[error("concat requires at least one input")]
    EmptyConcat,
    #[error("{op}: non-finite value encountered in {what}")]
    NonFinite { op: &'static str, what: String },
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

/// Contiguous row-major n-dimensional value.
///
/// `product(shape) == data.len()` always holds; a rank-0 shape denotes a
/// scalar holding exactly one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeData {
                op: "tensor",
                shape,
                len: data.len(),
            });
        }
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<E>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-exact cast between element types (f32 -> f64 is lossless).
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}
