//! Bayesian Federated Inference (BFI) for generalized linear models.
//!
//! Each data center fits a GLM locally by maximum a posteriori estimation
//! under a zero-mean Gaussian prior and shares only its estimate, the
//! curvature of its log posterior at the estimate, its prior precision and
//! its sample size. A central server combines those summaries in a single
//! round into an approximation of the fit that pooling all data would have
//! produced, with credible intervals, heterogeneity diagnostics and the
//! weighted-average / single-center baselines used for benchmarking.

pub mod combine;
pub mod error;
pub mod fit;
pub mod glm;
pub mod inference;
pub mod linalg;
pub mod message;
pub mod prior;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
