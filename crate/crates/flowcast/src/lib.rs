//! Conditional normalizing flows for probabilistic forecasting of bounded
//! time series, with monotonic rational-quadratic spline transforms,
//! maximum-likelihood training on a built-in reverse-mode autodiff engine,
//! affine/logit-normal baselines, and proper-scoring evaluation.

pub mod autodiff;
pub mod base_dist;
pub mod baselines;
pub mod data;
pub mod error;
pub mod flow;
pub mod matrix;
pub mod metrics;
pub mod nets;
pub mod rq_spline;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
