//! Empirical estimation of implicit regularization by gradient matching.
//!
//! Training procedures rarely return exact minimizers of the stated loss:
//! early stopping, minibatching, dropout, and finite step sizes all leave a
//! residual loss gradient at the returned weights, or bend per-step updates
//! away from the raw gradient. This crate treats those deviations as the
//! signature of an effective regularizer `R(theta, D, Lambda)` and estimates
//! `Lambda` by regressing residual gradients (or per-step update deviations)
//! onto the gradients of candidate regularizer families.
//!
//! The crate is organized as:
//! * [`numkernel`] dense linear algebra (eigen, SVD least squares, SPD solve)
//! * [`synthdata`] seeded synthetic datasets, splits, bootstrap resampling, IDX files
//! * [`models`] linear/MLP models with exact gradients and Hessian-vector products
//! * [`regfam`] parametrized regularizer families and their feature matrices
//! * [`training`] full-batch GD and momentum SGD with early stopping
//! * [`flowref`] RK4 gradient-flow references and GD-vs-flow discrepancies
//! * [`estimator`] gradient-matching systems, closed-form and iterative fits
//! * [`oracles`] closed-form targets (ridge, early-stopping matrices, step-size penalty)
//! * [`harness`] config-driven experiment runners and the `gradmatch` CLI

pub mod estimator;
pub mod flowref;
pub mod models;
pub mod numkernel;
pub mod regfam;
pub mod oracles;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use models::ParamVector;
pub use numkernel::Matrix;
pub use synthdata::Dataset;
