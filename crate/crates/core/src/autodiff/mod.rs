//! Reverse-mode differentiation over an append-only graph of tensor
//! primitives, with a central-difference gradient checker.

mod gradcheck;
pub mod probes;
mod graph;
pub mod ops;
mod tensor;

use thiserror::Error;

pub use gradcheck::{check_gradients, grad_check, GradReport};
pub use graph::{Gradients, Graph, NodeId, Precision};
pub use ops::{AttrMap, AttrValue, Primitive, PrimitiveKind};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{primitive}: shape mismatch: {detail}")]
    ShapeMismatch { primitive: &'static str, detail: String },
    #[error("{primitive}: expected {expected} inputs, got {got}")]
    Arity {
        primitive: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown primitive kind `{0}`")]
    UnknownKind(String),
    #[error("attribute `{key}`: {detail}")]
    BadAttribute { key: String, detail: String },
    #[error("{primitive}: zero-norm input")]
    ZeroNorm { primitive: &'static str },
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("gradient checks require 64-bit precision")]
    PrecisionMode,
    #[error("finite-difference step {0} outside [1e-7, 1e-4]")]
    BadStep(f64),
}
