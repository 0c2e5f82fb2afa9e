//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. [`Tensor`]
//! is a cheap `Copy` handle into it. Parameters live outside the graph in a
//! [`ParamStore`] and are copied in as leaves; after [`Graph::backward`] their
//! gradients are read back with [`Graph::param_grads`].
//!
//! Broadcasting follows the usual right-aligned rule (dims equal or 1); it is
//! only used for bias and per-row scaling in this crate.

mod backward;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod ops;
mod param;

pub use graph::{Graph, Tensor};
pub use param::{ParamId, ParamStore, Parameter};

/// Scalar type of all tensors.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, n, inner)` view of `shape` around `axis`.
pub(crate) fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
