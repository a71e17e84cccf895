//! Stochastic variational Bayes for nonlinear forward models with additive
//! Gaussian noise.
//!
//! The posterior over `[θ, -ln φ]` is a multivariate normal fitted by Adam
//! on a reparameterized Monte-Carlo estimate of the free energy. See
//! [`optimizer::fit`] for the entry point.

pub mod error;
pub mod free_energy;
pub mod gaussian;
pub mod harness;
pub mod io;
pub mod models;
pub mod optimizer;
pub mod oracles;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use free_energy::{elbo_gradient, estimate_elbo, log_likelihood, ElboEstimate, HyperGradient, Problem};
pub use gaussian::{cholesky, kl_mvn, sample_posterior, GaussianSpec, LatentVector, StandardNormalDraw, Structure};
pub use models::{ForwardModel, ModelSignature};
pub use optimizer::{convergence_time, fit, fit_many, fit_many_with, FitResult, InitStrategy, ManyFit, OptimizerConfig};
