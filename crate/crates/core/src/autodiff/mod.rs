//! Reverse-mode differentiation over a small fixed vocabulary of matrix
//! operations, with a named parameter store and a finite-difference checker.

mod check;
mod matrix;
pub mod nn;
mod store;
mod tape;

pub use check::{grad_check, GradCheck};
pub use matrix::{log_softmax_slice, logsumexp_slice, sigmoid, softmax_slice, softplus, Matrix};
pub use store::{Gradients, ParamStore, ParamTensor};
pub use tape::{Tape, Var};
