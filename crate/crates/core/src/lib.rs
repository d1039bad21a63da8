//! Refining Gaussian approximate posteriors of last-layer Bayesian models with
//! radial normalizing flows, and comparing their predictives with HMC and with
//! closed-form probit approximations.

pub mod error;
pub mod numeric;
pub mod models;
pub mod laplace;
pub mod flows;
pub mod refine;
pub mod sampler;
pub mod predictive;
pub mod metrics;
pub mod data_io;
pub mod experiments;

pub use error::{Error, Result};
