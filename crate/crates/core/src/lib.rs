//! Simulation of the vector stochastic heat equation on a circle,
//!
//! ```text
//! ∂ₜu = ½∂ₓ²u + g(t, x, u) + σ(t, x, u)·Ẇ,   x ∈ [0, J),
//! ```
//!
//! with importance-sampled small-ball probabilities, exact Gaussian
//! covariance tools for the additive case, and the scaling and support
//! reductions used to relate different problems.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod experiments;
pub mod field;
pub mod gaussian;
pub mod girsanov;
pub mod heat_kernel;
pub mod solver;
pub mod spectral;
pub mod stats;
pub mod white_noise;

pub use error::{Error, Result};
pub use field::{CircleGrid, Field};
pub use girsanov::{GirsanovWeight, TiltSpec};
pub use heat_kernel::KernelPoint;
pub use solver::{DriftSpec, Model, PathRecord, SigmaSpec};
pub use white_noise::{Grid, NoisePath};
