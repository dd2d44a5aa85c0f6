//! Composable Riemannian modules: forward evaluation, backpropagated
//! adjoints, per-layer output Jacobians and Cholesky-factor pullback.

mod module;
mod network;
mod parse;

pub use module::{Activation, Module, ModuleKind};
pub use network::{
    Adjoints, LayerAdjoint, LayerJacobian, Network, Op, OpKind, ParameterState, Tape,
};
