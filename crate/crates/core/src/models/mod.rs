//! Likelihood models over which posteriors are formed.

pub mod data;
pub mod likelihood;
pub mod network;
pub mod objective;

pub use data::{Dataset, Targets};
pub use likelihood::Likelihood;
pub use network::{Activation, Network, SoftmaxLinearModel, TinyMlp};
pub use objective::{
    BatchLogJoint, Minibatcher,
    grad_log_joint, grad_log_likelihood, grad_log_prior, log_joint, log_likelihood, log_prior,
    LogDensity, LogJoint,
};
