//! Reverse-mode automatic differentiation over an append-only graph.
//!
//! Values live in a [`Graph`] as eagerly evaluated nodes; every operation
//! records enough structure that [`Graph::grad`] can later walk the graph in
//! reverse and build the gradient. The twist that everything downstream
//! relies on: the backward pass does not compute gradients with raw `f64`
//! loops — it *builds them as new graph nodes*. A gradient produced with
//! `create_graph = true` is therefore itself differentiable, which is what
//! makes gradient-based losses (penalties on ∂y/∂x) trainable by ordinary
//! SGD.
//!
//! Design notes:
//!
//! - Node ids are assigned in insertion order, so ids are already a
//!   topological order and the backward sweep is a single descending pass.
//! - Gradient contributions are accumulated with ordinary `add` nodes in
//!   encounter order; combined with single-threaded evaluation this makes
//!   every gradient bitwise reproducible.
//! - Every op checks its operands' shapes and graph identity, and every
//!   produced value is scanned for NaN/Inf so numerical blowups surface at
//!   the op that caused them instead of corrupting a training run silently.
//! - A finished graph is immutable apart from appending; reading values
//!   through shared references is safe from multiple threads, and distinct
//!   graphs never share state.

mod graph;
mod tensor;

pub use graph::{AutodiffError, Graph, VarHandle};
pub use tensor::{Shape, Tensor};

/// Convenience alias for fallible graph operations.
pub type Result<T> = std::result::Result<T, AutodiffError>;
