//! Dense `f64` tensors, a reverse-mode tape, MLPs and Adam.
//!
//! Sized for small networks (a few layers of at most a few hundred units)
//! trained on CPU. Only 2-D matmul and elementwise ops are supported.

mod adam;
mod mlp;
mod tape;
mod tensor;

pub use adam::Adam;
pub use mlp::{polyak_update, Activation, Mlp, MlpBinding};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
}
