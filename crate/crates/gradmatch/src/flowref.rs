//! Continuous gradient-flow reference trajectories via classical fourth-order
//! Runge-Kutta, and the per-unit-time discrepancy between one discrete GD step
//! and the flow over the same elapsed time.
//!
//! The reference is integrated with RK4 rather than sub-stepped Euler on
//! purpose: smaller Euler steps would reintroduce the first-order
//! backward-error term the discrepancy is supposed to isolate, building the
//! target into the reference. RK4's own error is `O((eta/k)^4)`, far below
//! the `O(eta^2)` structure being measured.

use thiserror::Error;

use crate::models::{self, Activation, ModelError, ModelKind, ModelSpec, ParamVector};
use crate::synthdata::Dataset;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow integration produced non-finite values at substep {substep}")]
    Divergence { substep: usize },
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Elapsed flow time and substep count for one RK4 integration.
#[derive(Clone, Copy, Debug)]
pub struct FlowConfig {
    pub elapsed: f64,
    pub substeps: usize,
}

impl FlowConfig {
    pub fn new(elapsed: f64, substeps: usize) -> Result<Self, FlowError> {
        if elapsed <= 0.0 {
            return Err(FlowError::Config(format!(
                "elapsed time must be positive, got {elapsed}"
            )));
        }
        if substeps == 0 {
            return Err(FlowError::Config("substeps must be >= 1".into()));
        }
        Ok(FlowConfig { elapsed, substeps })
    }
}

/// Integrates `d theta / ds = -grad(theta)` for time `cfg.elapsed` with
/// `cfg.substeps` classical RK4 steps.
pub fn rk4_flow<F>(grad: F, theta0: &ParamVector, cfg: &FlowConfig) -> Result<ParamVector, FlowError>
where
    F: Fn(&ParamVector) -> ParamVector,
{
    let h = cfg.elapsed / cfg.substeps as f64;
    let mut theta = theta0.clone();
    for substep in 0..cfg.substeps {
        let k1 = grad(&theta).scale(-1.0);
        let k2 = grad(&theta.add_scaled(h / 2.0, &k1)).scale(-1.0);
        let k3 = grad(&theta.add_scaled(h / 2.0, &k2)).scale(-1.0);
        let k4 = grad(&theta.add_scaled(h, &k3)).scale(-1.0);
        let mut update = k1;
        update = update.add_scaled(2.0, &k2);
        update = update.add_scaled(2.0, &k3);
        update = update.add_scaled(1.0, &k4);
        theta = theta.add_scaled(h / 6.0, &update);
        if !theta.all_finite() {
            return Err(FlowError::Divergence { substep });
        }
    }
    Ok(theta)
}

/// Per-unit-time discrepancy between the gradient flow of the loss over time
/// `eta` and one full-batch GD step of size `eta`:
/// `(flow(theta) - theta + eta grad L(theta)) / eta`.
///
/// For small `eta` this equals `(eta/2) H(theta) g(theta) + O(eta^2)`. The
/// loss must be twice differentiable (tanh or linear models).
pub fn gd_flow_discrepancy(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    eta: f64,
    substeps: usize,
) -> Result<ParamVector, FlowError> {
    if spec.kind == ModelKind::Mlp && spec.activation == Activation::Relu {
        return Err(FlowError::Model(ModelError::Smoothness(
            "flow discrepancies require a twice-differentiable loss; relu is rejected".into(),
        )));
    }
    let cfg = FlowConfig::new(eta, substeps)?;
    let g = models::loss_grad(spec, theta, data, None)?;
    let flowed = rk4_flow(
        |t| models::loss_grad(spec, t, data, None).expect("gradient on flow path"),
        theta,
        &cfg,
    )?;
    // (delta_flow - delta_gd) / eta with delta_gd = -eta g.
    Ok(flowed.sub(theta).add_scaled(eta, &g).scale(1.0 / eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LossKind;
    use crate::numkernel::Matrix;

    /// L(theta) = (1/2) theta^2 via a linear model on X = [1], y = 0.
    fn scalar_quadratic() -> (ModelSpec, Dataset) {
        let spec = ModelSpec::linear(1, 1, LossKind::SquaredErrorHalf);
        let data = Dataset {
            x: Matrix::from_rows(&[vec![1.0]]),
            y: Matrix::from_rows(&[vec![0.0]]),
            id: "exp".into(),
        };
        (spec, data)
    }

    /// Half-mse loss with H = diag(1, 2): X^T X / n = diag(1, 2) at n = 2.
    fn diag_quadratic() -> (ModelSpec, Dataset) {
        let spec = ModelSpec::linear(2, 1, LossKind::HalfMseNormalized);
        let data = Dataset {
            x: Matrix::from_rows(&[vec![2.0_f64.sqrt(), 0.0], vec![0.0, 2.0]]),
            y: Matrix::from_rows(&[vec![0.0], vec![0.0]]),
            id: "diag".into(),
        };
        (spec, data)
    }

    #[test]
    fn exponential_flow_matches_closed_form() {
        let (spec, data) = scalar_quadratic();
        let grad = |t: &ParamVector| models::loss_grad(&spec, t, &data, None).unwrap();
        let cfg = FlowConfig::new(0.1, 10).unwrap();
        let out = rk4_flow(grad, &ParamVector(vec![1.0]), &cfg).unwrap();
        assert!((out[0] - (-0.1_f64).exp()).abs() < 1e-10, "{}", out[0]);
    }

    #[test]
    fn zero_gradient_leaves_theta_unchanged() {
        let cfg = FlowConfig::new(1.0, 4).unwrap();
        let theta = ParamVector(vec![0.3, -0.7]);
        let out = rk4_flow(|_| ParamVector::zeros(2), &theta, &cfg).unwrap();
        assert_eq!(out.as_slice(), theta.as_slice());
    }

    #[test]
    fn richardson_order_at_least_three_point_seven() {
        let (spec, data) = scalar_quadratic();
        let grad = |t: &ParamVector| models::loss_grad(&spec, t, &data, None).unwrap();
        let theta0 = ParamVector(vec![1.0]);
        let exact = (-1.0_f64).exp();
        let err_at = |k: usize| {
            let cfg = FlowConfig::new(1.0, k).unwrap();
            (rk4_flow(grad, &theta0, &cfg).unwrap()[0] - exact).abs()
        };
        let e1 = err_at(5);
        let e2 = err_at(10);
        let order = (e1 / e2).log2();
        assert!(order >= 3.7, "observed order {order}");
    }

    #[test]
    fn rk4_beats_substepped_euler_by_two_orders() {
        let (spec, data) = scalar_quadratic();
        let grad = |t: &ParamVector| models::loss_grad(&spec, t, &data, None).unwrap();
        let theta0 = ParamVector(vec![1.0]);
        let eta = 0.5_f64;
        let k = 10;
        let exact = (-eta).exp();
        let cfg = FlowConfig::new(eta, k).unwrap();
        let rk4_err = (rk4_flow(grad, &theta0, &cfg).unwrap()[0] - exact).abs();
        // Sub-stepped explicit Euler with the same number of gradient sweeps.
        let h = eta / k as f64;
        let mut t = theta0.clone();
        for _ in 0..k {
            let g = grad(&t);
            t = t.add_scaled(-h, &g);
        }
        let euler_err = (t[0] - exact).abs();
        assert!(
            euler_err > 100.0 * rk4_err,
            "euler {euler_err} vs rk4 {rk4_err}"
        );
    }

    #[test]
    fn discrepancy_matches_leading_taylor_term() {
        let (spec, data) = diag_quadratic();
        let theta = ParamVector(vec![1.0, 1.0]);
        let eta = 0.01;
        let t = gd_flow_discrepancy(&spec, &theta, &data, eta, 10).unwrap();
        // (eta/2) H^2 theta = (0.005, 0.02) for H = diag(1, 2).
        assert!((t[0] - 0.005).abs() < 0.005 * 0.02, "{}", t[0]);
        assert!((t[1] - 0.02).abs() < 0.02 * 0.02, "{}", t[1]);
    }

    #[test]
    fn discrepancy_scaled_residual_bounded_as_eta_halves() {
        // || T - (eta/2) H g || / eta^2 stays bounded as eta halves
        // (quadratic loss, exact flow available through RK4 at high k).
        let (spec, data) = diag_quadratic();
        let theta = ParamVector(vec![0.7, -0.4]);
        let hg = |t: &ParamVector| {
            let g = models::loss_grad(&spec, t, &data, None).unwrap();
            models::loss_hvp(&spec, t, &data, &g).unwrap()
        };
        let mut bounds = Vec::new();
        for &eta in &[0.04, 0.02, 0.01] {
            let t = gd_flow_discrepancy(&spec, &theta, &data, eta, 20).unwrap();
            let lead = hg(&theta).scale(eta / 2.0);
            let resid = t.sub(&lead).norm() / (eta * eta);
            bounds.push(resid);
        }
        let max = bounds.iter().cloned().fold(0.0_f64, f64::max);
        let min = bounds.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max < 10.0 * min.max(1e-6), "residual/eta^2 blew up: {bounds:?}");
    }

    #[test]
    fn discrepancy_ratio_test_converges_to_half_hg() {
        let (spec, data) = diag_quadratic();
        let theta = ParamVector(vec![1.0, 1.0]);
        let t1 = gd_flow_discrepancy(&spec, &theta, &data, 0.01, 10).unwrap();
        let t2 = gd_flow_discrepancy(&spec, &theta, &data, 0.005, 10).unwrap();
        let ratio = t1.norm() / t2.norm();
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn discrepancy_zero_at_stationary_point() {
        let (spec, data) = diag_quadratic();
        let theta = ParamVector::zeros(2);
        let t = gd_flow_discrepancy(&spec, &theta, &data, 0.01, 10).unwrap();
        assert_eq!(t.norm(), 0.0);
    }
}
