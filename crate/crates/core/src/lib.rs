//! Core numerics for multiple-patch weakly supervised detection.
//!
//! Everything here is `no_std` + `alloc`: boxes and patch grids, a small
//! define-then-run tensor graph with reverse-mode gradients, the
//! multiple-patch losses and continuation schedule, the feature fusion
//! rules, the cross-wise feature pyramid and detection metrics.
//! File formats, training loops and the command line live in the `mpfp`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
mod kernels;

pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod mpl;
pub mod optim;
pub mod pyramid;
pub mod tensor;

pub use error::Error;
pub use geometry::{iou, patch_grid, BBox, GridSpec};
pub use graph::{backward, forward, ComputeGraph, GraphBuilder, NodeId, OpKind, Params};
pub use tensor::Tensor;
