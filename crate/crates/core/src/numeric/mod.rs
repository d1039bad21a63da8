//! Numerical plumbing shared by every other module.

pub mod fd;
pub mod matrix;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod sampling;
pub mod sum;

pub use fd::{finite_diff_grad, finite_diff_jacobian, rel_error};
pub use matrix::{
    cholesky, cholesky_with_jitter, inverse_from_cholesky, log_det_from_cholesky, solve_lower,
    solve_lower_transpose, Matrix,
};
pub use optim::{cosine_lr, AdamState};
pub use parallel::{max_threads, par_map};
pub use rng::{Generator, RngStream};
pub use sampling::{sample_gaussian, standard_normal_vec, Provenance, SampleSet};
