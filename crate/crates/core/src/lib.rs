//! Joint causal discovery and missing-value imputation.
//!
//! The engine learns a directed graph over pre-defined variable groups while
//! training a structured-latent variational autoencoder that imputes missing
//! values.  Each group owns a latent subspace; a GNN decoder propagates latent
//! information along soft-sampled edges of a learned Bernoulli edge posterior,
//! and a differentiable acyclicity penalty steers the posterior towards DAGs.
//!
//! Module map:
//! - [`tensor`]: dense `f64` tensors with tape-based reverse-mode autodiff
//!   and a seedable, stream-addressable random number generator,
//! - [`graph`]: Bernoulli edge posterior, soft sampling, acyclicity penalty,
//! - [`model`]: group spec, encoder, message-passing decoder, readout,
//! - [`train`]: ELBO, masking, Adam, and the two-stage fitting loop,
//! - [`impute`]: Monte-Carlo imputation and held-out scoring pairs,
//! - [`data`]: datasets, CSV ingestion, and the synthetic SEM generator,
//! - [`metrics`]: structure/imputation metrics, baselines, group roll-up.

pub mod data;
pub mod error;
pub mod graph;
pub mod impute;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
