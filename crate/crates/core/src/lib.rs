//! Layerwise Riemannian metrics for modular models.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense matrices, upper Cholesky factors, SPD solves, eigenvalues.
//! * [`graph`]: composable modules with adjoints, layer Jacobians and factor pullback.
//! * [`metric`]: output metrics and the Woodbury application of `(D + KᵀK)⁻¹`.
//! * [`loss`] and [`optimizer`]: Riemannian SGD with layerwise metrics and a plain SGD baseline.
//! * [`action`]: gradient flow as the minimiser of an action, Hamiltonian checks.
//! * [`stability`]: generalized NTK and the paired leave-one-replaced experiment.

pub mod action;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod loss;
pub mod metric;
pub mod optimizer;
pub mod rng;
pub mod stability;

pub use error::{Error, Result};
