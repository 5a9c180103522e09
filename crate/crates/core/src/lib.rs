//! Interactive preference elicitation over items and soft attributes.
//!
//! The crate keeps a Bayesian belief over a user's utility vector in an item
//! embedding space and chooses slate queries (item, attribute, or
//! item-plus-attribute) whose answers are most useful for recommendation.
//! Soft attributes are represented by concept activation vectors (CAVs),
//! optionally with Gaussian uncertainty over the vector itself.
//!
//! Module map:
//! - [`catalog`]: items, user priors, tag data and their file formats.
//! - [`cav`]: CAV training, g-scores, quality, and uncertain CAV beliefs.
//! - [`response`]: user response models and simulated answers.
//! - [`belief`]: log-posterior, gradients, MCMC and Laplace posteriors.
//! - [`acquisition`]: entropy, mutual information, EVOI and BPER scoring.
//! - [`optimizer`]: query search (random, Thompson, greedy, random search,
//!   continuous relaxation).
//! - [`session`]: the propose/observe loop shared by simulations and the
//!   HTTP service.

pub mod acquisition;
pub mod belief;
pub mod catalog;
pub mod cav;
mod error;
pub mod linalg;
pub mod optimizer;
pub mod response;
pub mod rng;
pub mod session;
pub mod stats;

pub use error::{Error, Result};

/// Dense real vector used for all embeddings.
pub type Vector = nalgebra::DVector<f64>;
/// Dense real matrix (scale factors, Hessians).
pub type Matrix = nalgebra::DMatrix<f64>;
