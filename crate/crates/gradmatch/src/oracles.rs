//! Closed-form theory targets used to validate estimates: the ridge solution,
//! the data-dependent quadratic penalty induced by early-stopped gradient
//! descent on least squares (Ali et al., 2019), the discrete-step gradient
//! penalty coefficient of Barrett & Dherin (2021), and scalarized summaries.
//!
//! Conventions pinned here (and verified by the consistency tests): gradient
//! descent on the half-normalized squared loss updates
//! `theta <- theta - (eta/n) X^T (X theta - y)` from `theta_0 = 0`, and the
//! iterate at step `t` is the exact minimizer of
//! `(1/n) ||y - X theta||^2 + theta^T Lambda_t theta` with
//! `Lambda_t = V S ((I - eta S)^{-t} - I)^{-1} V^T`, where
//! `(1/n) X^T X = V S V^T`. Eigendirections with `s = 0` never move from the
//! zero start, and their `Lambda_t` entry is set to the limit value 0.

use thiserror::Error;

use crate::numkernel::{solve_spd, sym_eig, Matrix, NumError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("step size violation: eta * s_max = {product} must be < 1")]
    StepSize { product: f64 },
    #[error("invalid oracle input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// The theory matrix `Lambda_t` for the quadratic-form convention
/// `theta^T Lambda theta`, together with the step/step-size it refers to.
#[derive(Clone, Debug)]
pub struct TheoryLambda {
    pub matrix: Matrix,
    pub t: usize,
    pub eta: f64,
}

/// Exact ridge solution `(X^T X + lambda I)^{-1} X^T y` of
/// `(1/2) ||y - X theta||^2 + (lambda/2) ||theta||^2`.
pub fn ridge_closed_form(x: &Matrix, y: &[f64], lambda: f64) -> Result<Vec<f64>, OracleError> {
    if x.rows() != y.len() {
        return Err(OracleError::Invalid(format!(
            "X has {} rows but y has {} entries",
            x.rows(),
            y.len()
        )));
    }
    if lambda < 0.0 {
        return Err(OracleError::Invalid(format!(
            "ridge strength must be nonnegative, got {lambda}"
        )));
    }
    let mut a = x.gram_scaled(1.0);
    for i in 0..a.rows() {
        let v = a.get(i, i) + lambda;
        a.set(i, i, v);
    }
    let rhs = x.tr_matvec(y);
    Ok(solve_spd(&a, &rhs)?)
}

/// The quadratic penalty induced at step `t` by gradient descent with step
/// size `eta` on least squares from a zero start:
/// `Lambda_t = V S ((I - eta S)^{-t} - I)^{-1} V^T`.
pub fn ali_lambda(x: &Matrix, eta: f64, t: usize) -> Result<TheoryLambda, OracleError> {
    if t == 0 {
        return Err(OracleError::Invalid("t must be >= 1".into()));
    }
    if eta <= 0.0 {
        return Err(OracleError::Invalid(format!(
            "step size must be positive, got {eta}"
        )));
    }
    let n = x.rows();
    let sigma = x.gram_scaled(n as f64);
    let eig = sym_eig(&sigma)?;
    let s_max = eig.eigenvalues.iter().fold(0.0_f64, |m, &s| m.max(s));
    if eta * s_max >= 1.0 {
        return Err(OracleError::StepSize {
            product: eta * s_max,
        });
    }
    let p = sigma.rows();
    let mut matrix = Matrix::zeros(p, p);
    for k in 0..p {
        let s = eig.eigenvalues[k].max(0.0);
        // s ((1 - eta s)^{-t} - 1)^{-1} = s q^t / (1 - q^t), q = 1 - eta s.
        // The s -> 0 limit is 0 (those directions never move from zero).
        let f = if s <= 0.0 {
            0.0
        } else {
            let log_q = (1.0 - eta * s).ln();
            let qt = (t as f64 * log_q).exp();
            let denom = -f64::exp_m1(t as f64 * log_q); // 1 - q^t without cancellation
            s * qt / denom
        };
        if f == 0.0 {
            continue;
        }
        for i in 0..p {
            let vf = eig.eigenvectors.get(i, k) * f;
            for j in 0..p {
                let cur = matrix.get(i, j);
                matrix.set(i, j, cur + vf * eig.eigenvectors.get(j, k));
            }
        }
    }
    Ok(TheoryLambda { matrix, t, eta })
}

/// Minimizer of `(1/n) ||y - X theta||^2 + theta^T Lambda theta`, i.e. the
/// solution of `((1/n) X^T X + Lambda) theta = (1/n) X^T y`.
pub fn ali_minimizer(x: &Matrix, y: &[f64], lambda: &TheoryLambda) -> Result<Vec<f64>, OracleError> {
    if x.rows() != y.len() {
        return Err(OracleError::Invalid(format!(
            "X has {} rows but y has {} entries",
            x.rows(),
            y.len()
        )));
    }
    let n = x.rows() as f64;
    let a = x.gram_scaled(n).add(&lambda.matrix);
    let rhs: Vec<f64> = x.tr_matvec(y).iter().map(|v| v / n).collect();
    Ok(solve_spd(&a, &rhs)?)
}

/// Coefficient of the squared-gradient penalty induced by discrete gradient
/// descent at step size `eta` in `p` dimensions: `eta p / 4`
/// (Barrett & Dherin, 2021).
pub fn barrett_lambda(eta: f64, p: usize) -> f64 {
    eta * p as f64 / 4.0
}

/// Single-number summary `trace(Lambda) / p` of a theory matrix, the target
/// for scalar-ridge heuristic fits on isotropic designs.
pub fn scalarize_lambda(lambda: &TheoryLambda) -> f64 {
    lambda.matrix.trace() / lambda.matrix.rows() as f64
}

/// Stationarity residual `-X^T (y - X theta) + lambda theta` of a ridge
/// solution; exact solutions drive it to zero.
pub fn ridge_stationarity_residual(x: &Matrix, y: &[f64], lambda: f64, theta: &[f64]) -> f64 {
    let pred = x.matvec(theta);
    let resid: Vec<f64> = y.iter().zip(&pred).map(|(yi, pi)| yi - pi).collect();
    let xtr = x.tr_matvec(&resid);
    let mut norm2 = 0.0;
    for i in 0..theta.len() {
        let v = -xtr[i] + lambda * theta[i];
        norm2 += v * v;
    }
    norm2.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LossKind, ModelSpec};
    use crate::synthdata::{gen_linear, LinearGenConfig};
    use crate::training::{train, TrainConfig};

    #[test]
    fn ridge_identity_example() {
        let x = Matrix::identity(2);
        let theta = ridge_closed_form(&x, &[1.0, 0.0], 1.0).unwrap();
        assert!((theta[0] - 0.5).abs() < 1e-14);
        assert!(theta[1].abs() < 1e-14);
    }

    #[test]
    fn ridge_reduces_to_ols_and_shrinks_monotonically() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 200,
            d: 5,
            coef_std: 2.0,
            noise_std: 0.5,
            seed: 30,
        })
        .unwrap();
        let y = data.y.column(0);
        let ols = ridge_closed_form(&data.x, &y, 0.0).unwrap();
        // OLS residual should be orthogonal to the columns.
        let resid = ridge_stationarity_residual(&data.x, &y, 0.0, &ols);
        assert!(resid < 1e-8, "stationarity {resid}");
        let mut prev = f64::INFINITY;
        for lambda in [1.0, 10.0, 100.0] {
            let theta = ridge_closed_form(&data.x, &y, lambda).unwrap();
            let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < prev, "norm not shrinking at lambda {lambda}");
            prev = norm;
        }
    }

    #[test]
    fn ridge_stationarity_identity_holds() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 300,
            d: 8,
            coef_std: 3.0,
            noise_std: 1.0,
            seed: 31,
        })
        .unwrap();
        let y = data.y.column(0);
        for lambda in [0.01, 0.1, 1.0, 10.0] {
            let theta = ridge_closed_form(&data.x, &y, lambda).unwrap();
            let resid = ridge_stationarity_residual(&data.x, &y, lambda, &theta);
            let scale: f64 = data.x.tr_matvec(&y).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(resid / scale < 1e-10, "lambda {lambda}: residual {resid}");
        }
    }

    #[test]
    fn ali_lambda_scalar_case() {
        // p = 1, s = 1 via X = (1) with n = 1: eta 0.1, t 1 -> 9.0.
        let x = Matrix::from_rows(&[vec![1.0]]);
        let lam = ali_lambda(&x, 0.1, 1).unwrap();
        assert!((lam.matrix.get(0, 0) - 9.0).abs() < 1e-12);
        let theta = ali_minimizer(&x, &[1.0], &lam).unwrap();
        assert!((theta[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ali_lambda_vanishes_for_large_t() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 400,
            d: 6,
            coef_std: 3.0,
            noise_std: 1.0,
            seed: 32,
        })
        .unwrap();
        let early = ali_lambda(&data.x, 0.1, 1).unwrap();
        let late = ali_lambda(&data.x, 0.1, 10_000).unwrap();
        assert!(
            late.matrix.frobenius_norm() < 1e-6 * early.matrix.frobenius_norm(),
            "late norm {}",
            late.matrix.frobenius_norm()
        );
    }

    #[test]
    fn ali_lambda_symmetric_psd() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 500,
            d: 7,
            coef_std: 1.0,
            noise_std: 1.0,
            seed: 33,
        })
        .unwrap();
        let lam = ali_lambda(&data.x, 0.2, 13).unwrap();
        assert!(lam.matrix.max_asymmetry() < 1e-10);
        let eig = sym_eig(&lam.matrix).unwrap();
        assert!(
            eig.eigenvalues[0] >= -1e-10,
            "min eigenvalue {}",
            eig.eigenvalues[0]
        );
    }

    #[test]
    fn ali_lambda_eigenvalues_decrease_in_t() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 300,
            d: 5,
            coef_std: 2.0,
            noise_std: 1.0,
            seed: 34,
        })
        .unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for t in [1usize, 3, 10, 50, 200] {
            let lam = ali_lambda(&data.x, 0.1, t).unwrap();
            let eig = sym_eig(&lam.matrix).unwrap();
            if let Some(p) = prev {
                for (a, b) in eig.eigenvalues.iter().zip(&p) {
                    assert!(a < b, "eigenvalue failed to decrease: {a} !< {b} at t {t}");
                }
            }
            prev = Some(eig.eigenvalues);
        }
    }

    #[test]
    fn step_size_violation_rejected() {
        let x = Matrix::from_rows(&[vec![10.0]]);
        assert!(matches!(
            ali_lambda(&x, 0.05, 1),
            Err(OracleError::StepSize { .. })
        ));
    }

    #[test]
    fn gd_iterate_solves_ali_objective() {
        // Central consistency check: the GD iterate on the half-normalized
        // squared loss equals the penalized minimizer at every tested t.
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 1000,
            d: 10,
            coef_std: 3.0,
            noise_std: 1.0,
            seed: 35,
        })
        .unwrap();
        let sigma = data.x.gram_scaled(1000.0);
        let eig = sym_eig(&sigma).unwrap();
        let s_max = eig.eigenvalues.last().unwrap();
        let eta = 0.5 / s_max;
        let y = data.y.column(0);
        let spec = ModelSpec::linear(10, 1, LossKind::HalfMseNormalized);
        let steps = vec![1usize, 5, 50, 500];
        let cfg = TrainConfig::gd_fixed_steps(eta, 500, 0).with_checkpoints(steps.clone());
        let (_, traj) = train(&spec, &data, &cfg, None).unwrap();
        for &t in &steps {
            let iterate = traj.theta_at(t).unwrap();
            let lam = ali_lambda(&data.x, eta, t).unwrap();
            let minimizer = ali_minimizer(&data.x, &y, &lam).unwrap();
            let diff: f64 = iterate
                .as_slice()
                .iter()
                .zip(&minimizer)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = minimizer.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-9, "t {t}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn barrett_examples() {
        assert!((barrett_lambda(0.01, 2) - 0.005).abs() < 1e-18);
        assert_eq!(barrett_lambda(0.0, 10), 0.0);
        assert_eq!(barrett_lambda(0.02, 3), 2.0 * barrett_lambda(0.01, 3));
    }

    #[test]
    fn scalarize_examples() {
        let lam = TheoryLambda {
            matrix: Matrix::diag(&[1.0, 3.0]),
            t: 1,
            eta: 0.1,
        };
        assert_eq!(scalarize_lambda(&lam), 2.0);
        let iso = TheoryLambda {
            matrix: Matrix::identity(4).scale(0.7),
            t: 1,
            eta: 0.1,
        };
        assert!((scalarize_lambda(&iso) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn theory_decays_over_checkpoint_grid() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 1000,
            d: 10,
            coef_std: 3.0,
            noise_std: 1.0,
            seed: 36,
        })
        .unwrap();
        let grid = [1usize, 2, 5, 10, 20, 50, 100, 150, 200, 300, 500, 1000];
        let mut prev = f64::INFINITY;
        for &t in &grid {
            let s = scalarize_lambda(&ali_lambda(&data.x, 0.01, t).unwrap());
            assert!(s < prev, "scalarized theory failed to decay at t {t}");
            prev = s;
        }
    }
}
