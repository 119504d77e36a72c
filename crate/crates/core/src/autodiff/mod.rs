//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, op_kind_suite, rel_error, GradCheckReport, GradCheckStatus};
pub use optim::Adam;
pub use tape::{BackwardRule, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{argmax, Tensor};

pub(crate) use tape::log_sum_exp;
#[cfg(test)]
pub(crate) use tape::softmax_in_place;
