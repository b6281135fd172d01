//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The engine covers exactly the operations the fault-detection models need:
//! 1-D cross-correlation, fully connected layers, ReLU, max pooling, a
//! reshape, softmax cross-entropy, mean squared error and the scalar glue
//! (`add`, `scale`) used to combine loss terms.
//!
//! Values are stored in the graph's element type (`f32` for training, `f64`
//! for gradient checking); every reduction accumulates in `f64` with a fixed
//! summation order so forward passes are bit-reproducible.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, Parameter};
pub use gradcheck::grad_check;
pub use graph::{conv_output_len, Graph, Padding, Var};
pub(crate) use graph::softmax_rows;
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on {axes}: {detail}")]
    Shape {
        op: &'static str,
        axes: &'static str,
        detail: String,
    },
    #[error("label {label} at batch position {position} is outside [0, {classes})")]
    LabelOutOfRange {
        label: usize,
        position: usize,
        classes: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("parameter `{0}` has no accumulated gradient")]
    MissingGradient(String),
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
