//! Joint longitudinal-survival modeling where the hazard depends on the
//! arc length (cumulative variation) of a latent longitudinal trajectory.
//!
//! The crate provides:
//!
//! - [`splines`]: clamped B-spline bases and derivatives for nonparametric
//!   trajectories,
//! - [`quadrature`]: trapezoid / Romberg integration, prefix arc-length
//!   grids, and the O(m) nested cumulative hazard,
//! - [`model`]: data and parameter types, log-likelihoods, log-posterior,
//!   and exact gradients of the discretized objective,
//! - [`simulate`]: dataset generation by inverting the cumulative hazard,
//! - [`mcmc`]: adaptive Metropolis-within-Gibbs and NUTS samplers,
//! - [`diagnostics`]: split-Rhat, ESS, DIC, posterior summaries, coverage
//!   scoring, curve tables, and risk flagging,
//! - [`config`] / [`io`] / [`cli`]: JSON run configs, CSV ingestion and
//!   emission, and the `balsam` command-line interface.

pub mod cli;
pub mod config;
pub mod diagnostics;
mod error;
pub mod io;
pub mod mcmc;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod simulate;
pub mod splines;

pub use error::{Error, Result};
