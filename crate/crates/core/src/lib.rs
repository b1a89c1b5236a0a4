//! Bipartite noisy stochastic block model for matrices of association z-scores.
//!
//! The crate fits a latent bipartite block structure to an `n1 x n2` matrix of
//! test statistics with variational EM, chooses the block counts by the
//! integrated classification likelihood, and turns the fitted model into
//! structured l-values whose thresholding controls the marginal FDR.
//!
//! Modules:
//! - [`model`]: parameter and data types, Gaussian densities, edge responsibilities
//! - [`simulate`]: seeded generators for latent graphs and noisy observations
//! - [`inference`]: initialization, E-step, M-step, ELBO and the fitting loop
//! - [`selection`]: ICL scoring and grid search over block counts
//! - [`testing`]: l-values, mFDR thresholding, BH / Storey / lfdr baselines, evaluation
//! - [`stats`]: correlation z-statistics from paired abundance tables, mCLR
//! - [`cli`]: command line front end and replicated experiments

pub mod cli;
pub mod error;
pub mod inference;
pub mod model;
pub mod rng;
pub mod selection;
pub mod simulate;
pub mod stats;
pub mod testing;

pub use error::{Error, Result};
