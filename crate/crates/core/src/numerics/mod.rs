//! Dense matrices, a small reverse-mode differentiation record, the Adam
//! optimizer and the flat binary parameter format.

mod adam;
mod gradcheck;
mod graph;
mod matrix;
mod params;
mod persist;
mod scalar;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckReport, Offender, REL_ERROR_FLOOR};
pub use graph::{softmax_rows, Gradients, Graph, NodeId};
pub use matrix::Matrix;
pub use params::ParamSet;
pub use persist::{load_params, save_params, ParamManifest, ShapeEntry, MAGIC, FORMAT_VERSION};
pub use scalar::Scalar;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("node {node} ({op}): incompatible shapes {left:?} and {right:?}")]
    NodeShape {
        node: usize,
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("node {node}: non-finite input value")]
    NonFiniteInput { node: usize },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFiniteValue { node: usize, op: &'static str },
    #[error("node {node} does not exist")]
    UnknownNode { node: usize },
    #[error("node {node} is not a leaf")]
    NotALeaf { node: usize },
    #[error("node {node} is not a parameter")]
    NotAParameter { node: usize },
    #[error("concatenation of zero nodes")]
    EmptyConcat,
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("backward requested before forward")]
    NotEvaluated,
    #[error("backward root must be 1x1, got {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },
    #[error("non-finite gradient for parameter {index}; step skipped")]
    NonFiniteGradient { index: usize },
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("parameter {name}: shape {expected:?} expected, got {got:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
