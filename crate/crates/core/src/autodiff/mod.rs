//! Dense tensors with a tape-style reverse-mode autodiff graph.
//!
//! Broadcasting is limited to bias-add; everything else needs explicit
//! reshapes. All kernels reduce in a fixed order, so two runs over the same
//! graph produce identical bits.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, REL_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
