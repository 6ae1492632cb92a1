//! One module per experiment pipeline.

pub mod bootstrap;
pub mod dropout;
pub mod early_stopping;
pub mod elasticnet;
pub mod gradcheck;
pub mod igr;
pub mod ridge;

use crate::estimator::EstimateResult;
use crate::numkernel::Matrix;

/// Maps a fitted quadratic-family estimate into the `theta^T Lambda theta`
/// convention used by the early-stopping theory matrices. The fitted family
/// gradient is `2 Lambda_fit theta` while the matching target was built from
/// the half-normalized loss, whose stationarity reads
/// `-grad L = Lambda_theory theta`; hence `Lambda_theory = 2 Lambda_fit`.
pub(crate) fn quadratic_matrix_in_theory_convention(fit: &EstimateResult) -> Option<Matrix> {
    fit.quadratic_matrix().map(|m| m.scale(2.0))
}

/// Fraction-style status cell: `ok` or `error: <reason>`.
pub(crate) fn status_ok() -> String {
    "ok".to_string()
}

pub(crate) fn status_error(msg: &str) -> String {
    format!("error: {msg}")
}
