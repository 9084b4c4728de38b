//! Dense `f64` tensors, tape-based reverse-mode autodiff, and Adam.

mod adam;
mod dense;
mod gradcheck;
mod graph;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dense::{ParamId, ParamSet, Tensor};
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, GradCheck, GRAD_FLOOR};
pub use graph::{Gradients, Graph, LinearMap, Var};
