//! Port-Hamiltonian neural network identification.
//!
//! The crate builds a linear port-Hamiltonian estimate from input-output data
//! (subspace identification, KYP solve, PSD repair, Cholesky normalization)
//! and uses it to initialize a structured nonlinear model trained with an
//! encoder-based truncated simulation loss.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod dataset;
pub mod experiments;
pub mod linalg;
pub mod linear_ident;
pub mod msd;
pub mod ph_construct;
pub mod phnn_model;
pub mod training;
