//! Minimal reverse-mode automatic differentiation.
//!
//! The pieces: [`tensor::Tensor`] for dense values, [`params::ParamStore`]
//! for persistent trainable state, [`graph::Graph`] for per-batch tapes with
//! a backward pass, [`kernels`] for the flat-array arithmetic underneath,
//! and [`gradcheck`] for finite-difference verification.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, NodeId, NORM_EPSILON};
pub use params::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
