//! Dense f32 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values live in a [`Tape`]; operations append nodes and return [`TensorId`]
//! handles. [`Tape::backward`] walks the recorded nodes in reverse and
//! accumulates gradients into every tensor that requires them. The op set is
//! exactly what the model needs: elementwise arithmetic, dense and strided
//! convolutions (forward and transposed), a few activations, reductions, and
//! shape plumbing.

mod adam;
mod conv;
mod gemm;
mod tape;

pub use adam::AdamState;
pub use conv::Padding;
pub use tape::{Tape, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: {reason}")]
    Unsupported { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: tensor id {id} is not on this tape (len {len})")]
    UnknownId { id: usize, len: usize },
    #[error("adam: parameter {index} has {param} elements but optimizer state has {state}")]
    AdamStateMismatch {
        index: usize,
        param: usize,
        state: usize,
    },
    #[error("adam: parameter {index} has no gradient")]
    AdamMissingGrad { index: usize },
}

/// A dense row-major f32 tensor. The element count always equals the product
/// of the dimension sizes, and every dimension size is at least one.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: "every dimension must be positive".to_string(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape implies {} elements, got {}", numel, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::from_vec(&[1], vec![v]).expect("scalar shape is valid")
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Accumulated gradient, if any backward pass has touched this tensor.
    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<f32> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn accumulate_grad(&mut self, src: &[f32]) {
        let buf = self.grad_mut();
        debug_assert_eq!(buf.len(), src.len());
        for (g, s) in buf.iter_mut().zip(src) {
            *g += s;
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.data.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot view {} elements as {:?}", self.data.len(), shape),
            });
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        Ok(out)
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: &str, value: Tensor) -> Self {
        Param {
            name: name.to_string(),
            value: value.with_requires_grad(),
        }
    }
}
