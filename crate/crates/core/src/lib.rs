//! Probabilistic multiple-instance learning with a sparse Gaussian process
//! posterior over per-instance attention scores.
//!
//! A bag of instance feature vectors is projected to a low-dimensional
//! space, a variational GP posterior over attention scores is marginalized
//! in closed form per bag, Monte Carlo attention samples reweigh the
//! projected instances into stochastic bag representations, and a softmax
//! classifier maps each to class probabilities. Training maximizes the
//! evidence lower bound (Monte Carlo cross-entropy minus the KL between the
//! inducing-value posterior and its GP prior) with exact reverse-mode
//! gradients. Evaluation covers bag metrics (balanced accuracy, AUROC,
//! adaptive calibration error), instance-level attention quality, and
//! predictive-uncertainty separation.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Mat;
