//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Tensors are immutable and cheaply cloneable. Ops record their history when
//! recording is enabled (see [`no_grad`]), and [`grad`] walks that history
//! backwards. Every derivative rule is itself expressed with recorded ops, so
//! `grad(.., create_graph = true)` returns gradients that can be
//! differentiated again, which is what a gradient penalty needs.
//!
//! Convolutions are lowered to im2col + GEMM; the input gradient of a
//! convolution is a transposed convolution and vice versa, and the weight
//! gradient is a third op whose own derivatives close over the same set.

mod graph;
mod kernels;
mod ops;
mod tensor;

pub use graph::{grad, grad_with_seed};
pub use tensor::{
    is_grad_enabled, no_grad, record_branches, replay_branches, with_grad_mode, BranchTape, ReplayStats, Tensor,
};
