//! Minimal differentiable-programming toolkit: tensors on a tape, parameter
//! storage, optimizer and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{Axis, Grads, Graph, GridMax, L1Target, Var};
pub use params::{Adam, ParamGrads, ParamId, ParamStore};
