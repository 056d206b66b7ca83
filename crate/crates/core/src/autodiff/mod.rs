//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node whose parents were created
//! earlier, so node order is already a topological order and `backward`
//! is a single reverse sweep. Nodes hold their forward value; gradients are
//! only materialized for nodes that (transitively) depend on a parameter.
//!
//! The operator set is deliberately closed: matmul, conv2d, add, mul, relu,
//! log, exp, softmax over the last axis, sum, mean, abs and a shape-only
//! reshape. Broadcasting covers a scalar operand and a per-row bias (a 1-D
//! right operand matching the last extent) and nothing else.

mod graph;

pub use graph::{Graph, Var};
