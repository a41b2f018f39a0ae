//! Hierarchical latent class regression: a Bayesian mixture of linear
//! regressions over agent → entity → event data, trained by collapsed
//! Gibbs sampling, with a federated variant that aggregates per-agent
//! sufficient-statistic deltas on a server.
//!
//! Modules:
//! - [`linalg`]: SPD matrices with rank-one inverse maintenance.
//! - [`model`]: data structures, hyperparameters, sufficient
//!   statistics, and the synthetic generator.
//! - [`inference`]: the collapsed sampler and predictors.
//! - [`federated`]: partial-participation rounds with γ-smoothed
//!   server aggregation.
//! - [`metrics`]: clustering and regression evaluation.
//! - [`io`]: CSV/JSON file formats and the agent-update wire envelope.

pub mod federated;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
