//! Nonparametric maximum likelihood (Kiefer–Wolfowitz GMLE) of a mixing
//! distribution on a finite grid, for estimating `E_G η(θ)` from stratified
//! survey counts with non-response or random stratum sizes.
//!
//! * [`models`]: likelihood kernels and parameter types.
//! * [`grid`]: product grids and mixing distributions.
//! * [`npmle`]: likelihood matrices and the EM fit.
//! * [`estimators`]: naive, pooled, GMLE plug-in and posterior-mean estimators.
//! * [`ci`]: confidence interval from a chi-square cell-likelihood constraint.
//! * [`sim`]: seeded Monte Carlo campaigns.
//!
//! The `parallel` feature (default) runs data-parallel loops on rayon; results
//! are bit-identical with and without it.

pub mod ci;
pub mod error;
pub mod estimators;
pub mod grid;
pub mod models;
pub mod npmle;
pub mod par;
pub mod sim;

pub use error::{Error, Result};
