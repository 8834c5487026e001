//! Sparse variational multi-output Gaussian process regression with
//! input-dependent coregionalization and a nonstationary Gibbs kernel.
//!
//! The model mixes `D` latent Gaussian processes through a lower-triangular
//! coefficient matrix `L(x)` that itself varies over the input space, so
//! output correlations and scales are input-dependent. The latent processes
//! use a Gibbs covariance whose lengthscale is the exponential of another
//! latent GP, giving input-dependent smoothness. All latent processes are
//! summarized by variational factors at a shared set of inducing inputs and
//! trained by doubly stochastic (reparameterized, minibatched) gradient
//! ascent on the evidence lower bound.
//!
//! Module map:
//! - [`numcore`]: dense matrices, jittered Cholesky, triangular solves,
//!   Gaussian KL.
//! - [`kernels`]: RBF and Gibbs covariance functions.
//! - [`model`]: variational state containers and sparse conditional /
//!   marginal moments.
//! - [`elbo`]: reparameterized sampling of the latent processes and the
//!   stochastic evidence lower bound (two per-datum estimators).
//! - [`diff`]: scalar reverse-mode tape, parameter packing, seeded gradients
//!   and the finite-difference oracle.
//! - [`trainer`]: Adam-based doubly stochastic training loop.
//! - [`predict`]: posterior predictive sampling, correlation tracks,
//!   evaluation metrics.
//! - [`data`]: synthetic data generation, CSV ingestion, standardization,
//!   splitting.
//! - [`baseline`]: exact independent GP regression per output.

pub mod baseline;
pub mod data;
pub mod diff;
pub mod elbo;
pub mod error;
pub mod kernels;
pub mod model;
pub mod numcore;
pub mod predict;
pub mod scalar;
pub mod trainer;

pub use data::Dataset;
pub use elbo::{ElboBreakdown, Estimator};
pub use error::{Error, Result};
pub use kernels::RbfKernel;
pub use model::{HyperParams, InducingSet, ModelState, VariationalGaussian, VariationalState};
pub use numcore::{CholFactor, Mat};
pub use scalar::Scalar;
pub use trainer::{TrainConfig, TrainTrace};

/// Deterministic derivation of a child seed from a base seed and a stream
/// index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
