//! Reverse-mode automatic differentiation and neural-network layers.
//!
//! The engine is a flat tape: every operation appends one node holding the
//! produced value, the parent indices and a closure that maps the incoming
//! gradient to per-parent gradients. All values are `f64` dynamic-dimension
//! arrays. Graphs are cheap, short-lived objects; a fresh one is built for
//! every training step or inference batch.

pub mod blob;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;

pub use graph::{Grads, Graph, Var};
pub use layers::{ParamId, ParamStore, Phase};
