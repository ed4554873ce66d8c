//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every tensor is viewed as a row-major matrix: rank-2 tensors as they are,
//! anything else as a single row. The [`Graph`] records each primitive as it
//! is applied; [`Graph::backward`] replays the tape in reverse and
//! [`Graph::accumulate_param_grads`] folds parameter gradients into a
//! [`Grads`] buffer laid out like the [`ParamSet`].

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, Difference, FdOptions, GradCheckReport};
pub use graph::{Fault, Graph, Var};
pub(crate) use graph::sigmoid;
pub use params::{Grads, ParamId, ParamSet};
pub use tensor::Tensor;
