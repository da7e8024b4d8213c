//! Bayesian personalized federated learning simulator.
//!
//! The crate trains per-client Bayesian neural networks whose mean-field
//! Gaussian parameters are split into a cross-client *shared* factor and a
//! client-specific *personalized* factor. A central server aggregates only
//! the shared factor; deterministic baselines (`fedavg`, `fedper`, `fedrep`,
//! `lgfedavg`) fall out of the same machinery as point-mass (Dirac) limits.
//!
//! Module map:
//! - [`gaussian`]: mean-field Gaussian parameter sets, sampling, closed-form KL.
//! - [`mlp`]: Bayesian multi-layer perceptron with a shared/personalized
//!   factor layout, Monte Carlo objectives, and reverse-mode gradients.
//! - [`trainer`]: per-client local optimization (Adam) for the variational
//!   and point-mass training paths.
//! - [`server`]: federated round loop, shared-factor aggregation, evaluation,
//!   and the novel-client personalization protocol.
//! - [`data`]: IDX image loading, label-skew partitioning, size regimes, and
//!   a synthetic Gaussian-blob task.
//! - [`metrics`]: accuracy, NLL, and confidence-calibration measures.
//! - [`theory`]: computable generalization-bound diagnostics.
//! - [`config`] / [`runner`]: experiment configuration, manifest
//!   serialization, and end-to-end experiment execution.

pub mod config;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod mat;
pub mod metrics;
pub mod mlp;
pub mod rng;
pub mod runner;
pub mod server;
pub mod theory;
pub mod trainer;

pub use error::{BpfedError, Result};
pub use mat::Mat;
