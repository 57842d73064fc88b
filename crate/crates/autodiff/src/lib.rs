//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`]
//! replays the records in reverse topological order and accumulates exact
//! analytic gradients into every reachable gradient-tracked tensor.
//! Gradients add across multiple uses of a value; callers zero parameter
//! gradients between optimization steps.
//!
//! Everything is 64-bit. The engine favors verifiability over speed:
//! every operation is paired with a finite-difference harness
//! ([`check_gradients`]) that compares analytic gradients against central
//! differences.
//!
//! A graph is owned and mutated by one thread at a time; [`Tensor`] values
//! are plain owned buffers and can move freely between threads.

mod check;
mod error;
mod graph;
mod kernels;
mod tensor;

pub use check::{check_gradients, GradCheckEntry, GradCheckReport};
pub use error::AutodiffError;
pub use graph::{Graph, NodeId, LOG_CLAMP};
pub use kernels::{conv_out_dim, matmul, softmax_rows};
pub use tensor::Tensor;
