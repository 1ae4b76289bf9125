//! Shared-Hessian, column-wise quadratic-programming weight reconstruction
//! for post-training pruning.
//!
//! After a binary pruning mask has been chosen for a weight matrix, the
//! layer-wise least-squares reconstruction objective decomposes into one
//! small quadratic program per output column. Every column shares the same
//! Hessian `H = XᵀX` built from calibration activations; only the set of
//! entries fixed by the mask differs. This crate provides:
//!
//! - dense matrix types and a deterministic binary tensor format ([`tensor`]),
//! - incremental Hessian accumulation from calibration sequences ([`hessian`]),
//! - mask selection (magnitude, input-scaled, N:M) and mask I/O ([`mask`]),
//! - construction of the batched column QPs with equality constraints
//!   encoded as tight variable bounds ([`qp`]),
//! - a restarted accelerated projected-gradient solver whose per-iteration
//!   cost is matrix-vector products with the shared Hessian ([`solver`]),
//! - a closed-form block solve used as an independent oracle ([`oracle`]),
//! - the end-to-end layer-by-layer pruning pipeline ([`pipeline`]),
//! - synthetic model/calibration generators for experiments ([`synth`]).

pub mod error;
pub mod hessian;
pub mod manifest;
pub mod mask;
pub mod oracle;
pub mod pipeline;
pub mod qp;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::DenseMatrix;
