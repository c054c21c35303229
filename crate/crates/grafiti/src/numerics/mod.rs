//! Dense tensor arithmetic with reverse-mode automatic differentiation,
//! the layer primitives the model is assembled from, and Adam.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod tape;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("expected a one-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor is not tracked on this tape")]
    NotOnTape,
    #[error("attention row {row} has no unmasked entries (isolated node)")]
    DegenerateAttention { row: usize },
    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("column slice {start}+{len} out of range for {cols} columns")]
    SliceOutOfRange {
        start: usize,
        len: usize,
        cols: usize,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("optimizer state mismatch: {params} parameter entries vs {state} state entries")]
    OptimizerStateMismatch { params: usize, state: usize },
    #[error("non-finite gradient for parameter {param_index}; training aborted")]
    NonFiniteGradient { param_index: usize },
}

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_difference_gradient, max_rel_error};
pub use layers::{
    activation, affine, mab, mab_grouped, mha, mha_grouped, AffineParams, MabParams, MhaParams,
};
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
