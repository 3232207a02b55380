//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The design is a per-call tape: a [`Tape`] records every forward
//! operation together with a backward rule, and [`Tape::backward`]
//! replays the rules in reverse to accumulate gradients into every
//! leaf that asked for them. Graphs are cheap to build and are thrown
//! away after each forward/backward pass, which is exactly what
//! input-gradient attacks need (fresh gradients w.r.t. a moving input
//! under frozen weights).

mod optim;
mod params;
mod tape;

pub use optim::{batch_mean_grads, check_finite_grads, extract_grads, plain_sgd, SgdMomentum};
pub use params::{bind_params, collect_grads, sync_grads, ParamSet, VarSet};
pub use tape::{Tape, Var};

#[cfg(test)]
mod tape_tests;

use serde::{Deserialize, Serialize};

/// Errors raised by tensor construction, graph building, and backward.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument for shape {shape:?}: {reason}")]
    InvalidArgument {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("data length {len} does not match shape {shape:?} (product {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("class index {index} out of range for {classes} classes")]
    InvalidClassIndex { index: usize, classes: usize },
    #[error("parameter `{name}` has no gradient (run backward before stepping)")]
    MissingGradient { name: String },
    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },
}

/// A dense row-major tensor of f64 values.
///
/// `grad`, when present, always has the same length as `data`; it is
/// written by [`sync_grads`] after a backward pass and consumed by the
/// optimizer. Serialization covers only `{shape, data}` so checkpoints
/// stay free of training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform init on `(-scale, scale)`, the `1/sqrt(fan_in)` convention
    /// being the caller's responsibility.
    pub fn uniform(shape: Vec<usize>, scale: f64, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a one-element tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Reset the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    /// Drop the gradient buffer entirely.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Replace the gradient buffer wholesale.
    pub fn set_grad(&mut self, g: Vec<f64>) -> Result<(), TensorError> {
        if g.len() != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: self.shape.clone(),
                len: g.len(),
                expected: self.data.len(),
            });
        }
        self.grad = Some(g);
        Ok(())
    }

    /// `grad += g`, allocating a zero buffer on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (slot, v) in grad.iter_mut().zip(g) {
            *slot += v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<(), TensorError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                context: context.to_string(),
            })
        }
    }
}
