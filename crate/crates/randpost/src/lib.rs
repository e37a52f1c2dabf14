//! Bayesian inversion with randomized forward maps.
//!
//! This crate solves finite-dimensional Bayesian inverse problems
//! `y = G(u) + noise` in which the forward map is replaced by a
//! mean-square convergent random approximation `G_h`. It provides
//!
//! - dense Gaussian-measure primitives: sampling, log-densities and the
//!   closed-form Hellinger distance ([`gaussian`]);
//! - exact and randomized linear forward maps with an empirical
//!   mean-square-order estimator ([`forward`]);
//! - potentials and the Monte Carlo likelihood/normalizing-constant
//!   estimators ([`potential`]);
//! - the four Metropolis-type samplers RWMH, PMMH, MCwM and MwMC
//!   ([`samplers`]);
//! - closed-form linear-Gaussian posteriors: exact, sample, marginal,
//!   averaged and finite mixtures ([`analytic`]);
//! - moment, Hellinger and convergence-rate diagnostics ([`diagnostics`]);
//! - the experiment harness reproducing the qualitative findings of the
//!   linear test cases ([`experiments`]) and its CLI front end ([`cli`]).
//!
//! Every stochastic component draws from seeded, stream-addressed
//! generators ([`rng`]), so experiment outputs are reproducible bitwise.

pub mod analytic;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod gaussian;
pub mod potential;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
