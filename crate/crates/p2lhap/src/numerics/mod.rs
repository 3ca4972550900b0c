//! Dense tensors, the reverse-mode gradient tape, Adam, and the seeded RNG.
//!
//! Storage is `f32` throughout the production path. Every kernel is generic
//! over [`Scalar`] so the finite-difference machinery in [`gradcheck`] can
//! run the identical computation at `f64`.

pub mod adam;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use rng::SplitMix64;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: String, rhs: String },

    #[error("shape {} does not fit buffer of length {len}", tensor::shape_string(shape))]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },

    #[error("{op}: normalization axis has zero extent")]
    EmptyAxis { op: &'static str },

    #[error("target class {id} out of range for {classes} classes")]
    InvalidTarget { id: usize, classes: usize },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("non-finite values produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
}
