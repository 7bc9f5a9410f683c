//! Reverse-mode differentiation over small dense matrices.
//!
//! The tape is rebuilt for every evaluation. Second derivatives of the
//! network activations are ordinary primitives (`tanh_prime`, `elu_prime`,
//! ...), so an input-gradient assembled from them in the forward pass can
//! itself be differentiated with a single reverse sweep.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_sampled, GradCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
