//! Variational inference for Bayesian linear regression on random Fourier
//! features, with diagonal, rank-1 and full-rank Gaussian posteriors.
//!
//! The numerical core is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which the experiment harness uses.

pub mod error;
pub mod features;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optimize;
pub mod oracle;
pub mod scalar;
pub mod vi;

pub use error::{Error, Result};
pub use vi::Structure;

pub type FeatureMap = features::RffFeatureMap<f64>;
pub type Kernel = features::KernelParams<f64>;
pub type Hyperparameters = model::Hyperparameters<f64>;
pub type Dataset = model::Dataset<f64>;
pub type Posterior = vi::GaussianPosterior<f64>;
pub type FitConfig = optimize::FitConfig<f64>;
pub type FitResult = optimize::FitResult<f64>;

pub type FeatureMapF32 = features::RffFeatureMap<f32>;
pub type PosteriorF32 = vi::GaussianPosterior<f32>;
