//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The engine is a flat tape: every operation appends a node holding the
//! forward value and a backward closure. Calling [`Graph::backward`] walks the
//! tape in reverse creation order and accumulates gradients. Graphs built with
//! [`Graph::inference`] skip closure allocation entirely.
//!
//! All math is generic over [`Scalar`] (`f32` or `f64`); concrete pipelines
//! pick an alias at their crate root.

pub mod check;
pub mod graph;
pub mod scalar;
pub mod store;

pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use store::{Adam, AdamConfig, ParamStore};
