//! Trajectory prediction with joint reliability assessment on synthetic
//! distribution-shift data.
//!
//! The crate trains a small encoder-decoder trajectory predictor, then adds
//! two post-hoc reliability modules on its frozen latent features: a full-
//! covariance Gaussian mixture whose negative log-likelihood is the
//! out-of-distribution score, and an error-regression head whose output is
//! the per-sample uncertainty. The evaluation battery covers displacement
//! and likelihood metrics, OOD AUROC, and error-retention curves.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod uncertainty;

pub use error::{Error, Result};
