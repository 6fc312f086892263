//! Variational Bayesian inference for sparse linear models.
//!
//! The model is `y = X u + e`, `e ~ N(0, sigma^2 I)`, with independent
//! super-Gaussian potentials on the coefficients `s = B u`. The crate offers
//! the double-loop minimizer of the variational criterion, Lanczos
//! estimates of posterior variances, automatic relevance determination and
//! sequential Bayesian experimental design over blocks of measurements.
//!
//! Data-parallel loops (candidate scoring, per-row variance reductions,
//! operator probing) go through [`par`], which uses rayon when the default
//! `parallel` feature is enabled and plain loops otherwise.

pub mod design;
pub mod error;
pub mod imaging;
pub mod linalg;
pub mod linops;
pub mod model;
pub mod par;
pub mod potentials;
pub mod scalar;
pub mod solvers;
pub mod variance;
pub mod varinf;

pub use error::{Result, SlmError};
pub use linops::{GroupLayout, LinearOperator, Operator};
pub use model::ModelSpec;
pub use potentials::{BoundCoefficients, PenaltyEval, PotentialKind, PotentialSpec};
