//! Bayesian benefit-risk analysis for multi-arm treatment data.
//!
//! The crate fits latent factor models to mixed continuous/binary outcomes,
//! checks them with posterior predictive p-values and cross-validated log
//! scores, and turns posterior draws (batch HMC) or weighted particles
//! (sequential Monte Carlo, one subject at a time) into MCDA score
//! posteriors.
//!
//! Module map:
//! - [`data`]: schemas, datasets, schedules, folds and the simulator.
//! - [`model`]: model variants, parameters, priors, likelihoods, transforms.
//! - [`laplace`]: Gaussian approximation of a subject's latent factor.
//! - [`mcmc`]: leapfrog HMC with dual averaging, plus the jitter move.
//! - [`fit`]: batch posterior fits and parameter summaries.
//! - [`smc`]: IBIS and IBIS-Laplace samplers.
//! - [`assessment`]: PPP values and mixtures-of-parameters log scores.
//! - [`mcda`]: partial utilities, scores, superiority probabilities, traces.
//! - [`cli`]: configuration and the command implementations behind the binary.

pub mod assessment;
pub mod cli;
pub mod data;
pub mod error;
pub mod fit;
pub mod laplace;
pub mod linalg;
pub mod mcda;
pub mod mcmc;
pub mod model;
pub mod rng;
pub mod smc;

pub use error::{Error, Result};
