//! Dense `f32` tensors, a reverse-mode tape over the handful of primitives a
//! small Transformer needs, and a finite-difference gradient checker.

mod grad_check;
mod kernels;
mod tape;
mod tensor;

pub use grad_check::{grad_check, grad_check_piecewise, GradCheckOptions, GradCheckReport, Parameters};
pub use tape::{AttentionLayout, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
