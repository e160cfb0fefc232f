//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod param;
mod real;
mod tensor;

pub use gradcheck::{analytic_gradient, finite_difference_check, DEFAULT_STEP};
pub use graph::{log_sum_exp, softmax_row, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use real::{Precision, Real};
pub use tensor::{flat_size, read_flat, write_flat, Tensor};

#[cfg(test)]
mod tests;
