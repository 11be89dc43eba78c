//! Minimal neural-network substrate: tensors flow through an eagerly-built
//! reverse-mode graph; parameters live in named blocks; Adam updates them.
//!
//! The pieces:
//! * [`params::ParamBlock`] — named parameter + gradient storage,
//! * [`graph::Graph`] — differentiable ops (dense, convolution, group norm,
//!   nonlinearities, embedding lookup, reductions, log-softmax losses),
//! * [`layers`] — initialization + forward helpers for the standard blocks,
//! * [`adam::Adam`] — the optimizer,
//! * [`gradcheck`] — central finite-difference verification at `f64`
//!   precision against the same generic op implementations.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod scalar;

pub use adam::Adam;
pub use gradcheck::{gradient_check, rel_error, GradCheckReport};
pub use graph::{forward_backward, Graph, NodeId};
pub use layers::{Conv2d, Embedding, GroupNorm, Linear};
pub use params::ParamBlock;
pub use scalar::Scalar;
