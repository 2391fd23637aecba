//! Dense tensors and reverse-mode differentiation.
//!
//! Supports gradients of gradients: backward passes write their
//! vector-Jacobian products onto the tape as ordinary nodes, so the outer
//! optimization can differentiate through an inner gradient step.

pub mod check;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
