//! Dense float64 tensors on a reverse-mode differentiation tape.
//!
//! A [`Graph`] records every forward operation in insertion order; a single
//! [`Graph::backward`] pass walks the tape once in reverse and accumulates
//! gradients for every node, including bound parameters. Graphs are built per
//! training step and dropped afterwards.

mod graph;
mod ops;
mod params;

pub mod check;

pub use graph::{Grads, Graph, Tensor};
pub use ops::{attention, conv1d, Padding};
pub use params::{Init, ParamId, ParamSet};
