//! Invertible density estimation by iterative Gaussianization.
//!
//! A Gaussianization flow transforms data toward a standard normal
//! distribution through a stack of layer pairs: an orthogonal rotation
//! followed by an element-wise monotone map built from a mixture of
//! logistic CDFs. Every layer is exactly invertible and carries an exact
//! log-Jacobian, so the model gives exact log-likelihoods through the
//! change-of-variables formula and can be trained end to end with
//! hand-derived reverse-mode gradients.
//!
//! The crate provides:
//!
//! - [`special`]: scalar normal CDF/ICDF/log-PDF and the sigmoid family,
//!   accurate enough for log-det accumulation and bisection inversion.
//! - [`kernel`]: the trainable element-wise layer (anchors + bandwidths),
//!   with forward map, exact log-det, bisection inverse, and gradients.
//! - [`rotation`]: Householder stacks and patch-based block-diagonal
//!   rotations; orthogonal by construction, inverse = transpose.
//! - [`flow`]: composition, likelihoods, sampling, data-dependent
//!   initialization, and checkpoint serialization.
//! - [`train`]: Adam maximum-likelihood training with deterministic
//!   seeded batching and a per-epoch metrics history.
//! - [`rbig`]: a frozen iterative-Gaussianization baseline (KDE marginal
//!   maps + PCA or random rotations).
//! - [`data`]: toy generators, CSV ingestion, normalization, splits,
//!   stretch transforms, and uniform dequantization.
//! - [`eval`]: Gaussianity diagnostics (marginal KL, joint KL on 2D
//!   grids, Kolmogorov-Smirnov statistics).

pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod kernel;
pub mod rbig;
pub mod rotation;
pub mod special;
pub mod train;

pub use error::{Error, Result};
