//! Dense `f64` tensors with a per-step reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Leaves are
//! trainable inputs; constants are not differentiated. Call
//! [`Graph::backward`] once on a scalar to obtain [`Gradients`] for every
//! leaf, then drop the graph.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords};
pub use graph::{AttentionLayout, Gradients, Graph, Var};
pub use tensor::Tensor;
