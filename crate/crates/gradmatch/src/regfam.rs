//! Parametrized regularizer families `R(theta, D, Lambda)`: values, gradients
//! in `theta`, and feature matrices `Phi` with `grad R = Phi Lambda` for
//! families linear in `Lambda`.
//!
//! Convention ledger (families deliberately use different scalings, and every
//! reported number states its convention):
//! * `scalar-ridge`: `R = (lambda/2) ||theta||^2`, gradient `lambda theta`.
//! * `diag-quadratic` / `sym-quadratic`: `R = theta^T Lambda theta`, gradient
//!   `2 Lambda theta`. The symmetric family is parametrized by its upper
//!   triangle in row-major order, so symmetry holds by construction; positive
//!   semidefiniteness is *not* enforced during fitting (the minimum eigenvalue
//!   is reported as a diagnostic instead).
//! * `smoothed-l1`: `lambda * sum_i huber_beta(theta_i)` with
//!   `huber_beta(u) = u^2 / (2 beta)` for `|u| < beta`, else `|u| - beta/2`.
//! * `elastic-net-smoothed`: `lambda_1 * sum_i huber_beta(theta_i)
//!   + lambda_2 ||theta||^2` (note the unscaled `||theta||^2`, gradient
//!   `2 lambda_2 theta`).
//! * `grad-norm-penalty`: `(lambda/p) ||grad L(theta)||^2`, gradient
//!   `(2 lambda / p) H(theta) g(theta)`; requires a model-and-data context and
//!   a twice-differentiable loss.

use thiserror::Error;

use crate::models::{self, ModelError, ModelSpec, ParamVector};
use crate::numkernel::Matrix;
use crate::synthdata::Dataset;

/// Default Huber smoothing width for the smoothed-l1 families.
pub const DEFAULT_BETA: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RegError {
    #[error("invalid regularizer parameters: {0}")]
    BadParams(String),
    #[error("family {0} requires a model-and-data context")]
    ContextRequired(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegFamily {
    ScalarRidge,
    DiagQuadratic,
    SymQuadratic,
    SmoothedL1,
    ElasticNetSmoothed,
    GradNormPenalty,
}

impl RegFamily {
    pub fn name(&self) -> &'static str {
        match self {
            RegFamily::ScalarRidge => "scalar-ridge",
            RegFamily::DiagQuadratic => "diag-quadratic",
            RegFamily::SymQuadratic => "sym-quadratic",
            RegFamily::SmoothedL1 => "smoothed-l1",
            RegFamily::ElasticNetSmoothed => "elastic-net-smoothed",
            RegFamily::GradNormPenalty => "grad-norm-penalty",
        }
    }
}

/// A regularizer family plus its smoothing width where applicable.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerSpec {
    pub family: RegFamily,
    pub beta: f64,
}

impl RegularizerSpec {
    pub fn new(family: RegFamily) -> Self {
        RegularizerSpec {
            family,
            beta: DEFAULT_BETA,
        }
    }

    pub fn with_beta(family: RegFamily, beta: f64) -> Result<Self, RegError> {
        if beta <= 0.0 {
            return Err(RegError::BadParams(format!(
                "smoothing width beta must be positive, got {beta}"
            )));
        }
        Ok(RegularizerSpec { family, beta })
    }

    /// Number of free parameters for a model with `p` weights.
    pub fn param_len(&self, p: usize) -> usize {
        match self.family {
            RegFamily::ScalarRidge | RegFamily::SmoothedL1 | RegFamily::GradNormPenalty => 1,
            RegFamily::DiagQuadratic => p,
            RegFamily::SymQuadratic => p * (p + 1) / 2,
            RegFamily::ElasticNetSmoothed => 2,
        }
    }

    pub fn needs_context(&self) -> bool {
        self.family == RegFamily::GradNormPenalty
    }
}

/// Regularization parameters `Lambda` laid out per family (sym-quadratic uses
/// the upper triangle row-major; elastic-net is `(lambda_1, lambda_2)`).
#[derive(Clone, Debug, PartialEq)]
pub struct RegParams(pub Vec<f64>);

impl RegParams {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scalar(v: f64) -> Self {
        RegParams(vec![v])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Index of upper-triangle entry `(i, j)` with `i <= j` in row-major order.
pub fn upper_tri_index(p: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < p);
    // Entries before row i: p + (p-1) + ... + (p-i+1) = i(2p - i + 1)/2.
    i * (2 * p - i + 1) / 2 + (j - i)
}

/// Materializes a diag- or sym-quadratic parameter vector as the symmetric
/// matrix of the quadratic form `theta^T Lambda theta`.
pub fn materialize_quadratic(spec: &RegularizerSpec, params: &RegParams, p: usize) -> Option<Matrix> {
    match spec.family {
        RegFamily::DiagQuadratic => Some(Matrix::diag(&params.0)),
        RegFamily::SymQuadratic => {
            let mut m = Matrix::zeros(p, p);
            for i in 0..p {
                for j in i..p {
                    let v = params.0[upper_tri_index(p, i, j)];
                    m.set(i, j, v);
                    m.set(j, i, v);
                }
            }
            Some(m)
        }
        _ => None,
    }
}

/// Model-and-data context for families whose gradients look at the loss
/// landscape (currently only `grad-norm-penalty`).
pub struct RegContext<'a> {
    pub model: &'a ModelSpec,
    pub data: &'a Dataset,
}

fn check_params(
    spec: &RegularizerSpec,
    params: &RegParams,
    p: usize,
) -> Result<(), RegError> {
    let want = spec.param_len(p);
    if params.len() != want {
        return Err(RegError::BadParams(format!(
            "{} expects {} parameter(s) for p={}, got {}",
            spec.family.name(),
            want,
            p,
            params.len()
        )));
    }
    Ok(())
}

fn huber(beta: f64, u: f64) -> f64 {
    if u.abs() < beta {
        u * u / (2.0 * beta)
    } else {
        u.abs() - beta / 2.0
    }
}

fn huber_prime(beta: f64, u: f64) -> f64 {
    if u.abs() < beta {
        u / beta
    } else {
        u.signum()
    }
}

/// `H(theta) g(theta)` for the gradient-norm penalty.
fn context_hg(ctx: &RegContext, theta: &ParamVector) -> Result<(ParamVector, ParamVector), RegError> {
    let g = models::loss_grad(ctx.model, theta, ctx.data, None)?;
    let hg = models::loss_hvp(ctx.model, theta, ctx.data, &g)?;
    Ok((g, hg))
}

/// Value of `R(theta, D, Lambda)`.
pub fn reg_value(
    spec: &RegularizerSpec,
    params: &RegParams,
    theta: &ParamVector,
    ctx: Option<&RegContext>,
) -> Result<f64, RegError> {
    let p = theta.len();
    check_params(spec, params, p)?;
    match spec.family {
        RegFamily::ScalarRidge => Ok(0.5 * params.0[0] * theta.dot(theta)),
        RegFamily::DiagQuadratic => Ok(theta
            .as_slice()
            .iter()
            .zip(&params.0)
            .map(|(t, l)| l * t * t)
            .sum()),
        RegFamily::SymQuadratic => {
            let m = materialize_quadratic(spec, params, p).unwrap();
            let mt = m.matvec(theta.as_slice());
            Ok(crate::numkernel::dot(theta.as_slice(), &mt))
        }
        RegFamily::SmoothedL1 => Ok(params.0[0]
            * theta
                .as_slice()
                .iter()
                .map(|&t| huber(spec.beta, t))
                .sum::<f64>()),
        RegFamily::ElasticNetSmoothed => {
            let l1: f64 = theta
                .as_slice()
                .iter()
                .map(|&t| huber(spec.beta, t))
                .sum();
            Ok(params.0[0] * l1 + params.0[1] * theta.dot(theta))
        }
        RegFamily::GradNormPenalty => {
            let ctx = ctx.ok_or(RegError::ContextRequired("grad-norm-penalty"))?;
            let g = models::loss_grad(ctx.model, theta, ctx.data, None)?;
            Ok(params.0[0] / p as f64 * g.dot(&g))
        }
    }
}

/// Gradient of `R` in `theta`.
pub fn reg_grad(
    spec: &RegularizerSpec,
    params: &RegParams,
    theta: &ParamVector,
    ctx: Option<&RegContext>,
) -> Result<ParamVector, RegError> {
    let p = theta.len();
    check_params(spec, params, p)?;
    match spec.family {
        RegFamily::ScalarRidge => Ok(theta.scale(params.0[0])),
        RegFamily::DiagQuadratic => Ok(ParamVector(
            theta
                .as_slice()
                .iter()
                .zip(&params.0)
                .map(|(t, l)| 2.0 * l * t)
                .collect(),
        )),
        RegFamily::SymQuadratic => {
            let m = materialize_quadratic(spec, params, p).unwrap();
            Ok(ParamVector(m.matvec(theta.as_slice())).scale(2.0))
        }
        RegFamily::SmoothedL1 => Ok(ParamVector(
            theta
                .as_slice()
                .iter()
                .map(|&t| params.0[0] * huber_prime(spec.beta, t))
                .collect(),
        )),
        RegFamily::ElasticNetSmoothed => Ok(ParamVector(
            theta
                .as_slice()
                .iter()
                .map(|&t| params.0[0] * huber_prime(spec.beta, t) + 2.0 * params.0[1] * t)
                .collect(),
        )),
        RegFamily::GradNormPenalty => {
            let ctx = ctx.ok_or(RegError::ContextRequired("grad-norm-penalty"))?;
            let (_, hg) = context_hg(ctx, theta)?;
            Ok(hg.scale(2.0 * params.0[0] / p as f64))
        }
    }
}

/// Per-parameter regularizer-gradient features: `p x r` matrix whose column
/// `k` is `d(grad R) / d(Lambda_k)`, so `grad R = Phi Lambda` exactly.
#[derive(Clone, Debug)]
pub struct FeatureMatrix(pub Matrix);

impl FeatureMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn feature_matrix(
    spec: &RegularizerSpec,
    theta: &ParamVector,
    ctx: Option<&RegContext>,
) -> Result<FeatureMatrix, RegError> {
    let p = theta.len();
    let r = spec.param_len(p);
    let mut phi = Matrix::zeros(p, r);
    match spec.family {
        RegFamily::ScalarRidge => {
            for i in 0..p {
                phi.set(i, 0, theta[i]);
            }
        }
        RegFamily::DiagQuadratic => {
            for i in 0..p {
                phi.set(i, i, 2.0 * theta[i]);
            }
        }
        RegFamily::SymQuadratic => {
            for i in 0..p {
                for j in i..p {
                    let col = upper_tri_index(p, i, j);
                    if i == j {
                        phi.set(i, col, 2.0 * theta[i]);
                    } else {
                        phi.set(i, col, 2.0 * theta[j]);
                        phi.set(j, col, 2.0 * theta[i]);
                    }
                }
            }
        }
        RegFamily::SmoothedL1 => {
            for i in 0..p {
                phi.set(i, 0, huber_prime(spec.beta, theta[i]));
            }
        }
        RegFamily::ElasticNetSmoothed => {
            for i in 0..p {
                phi.set(i, 0, huber_prime(spec.beta, theta[i]));
                phi.set(i, 1, 2.0 * theta[i]);
            }
        }
        RegFamily::GradNormPenalty => {
            let ctx = ctx.ok_or(RegError::ContextRequired("grad-norm-penalty"))?;
            let (_, hg) = context_hg(ctx, theta)?;
            for i in 0..p {
                phi.set(i, 0, 2.0 / p as f64 * hg[i]);
            }
        }
    }
    Ok(FeatureMatrix(phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LossKind;
    use crate::rng::RngStream;

    fn pv(v: Vec<f64>) -> ParamVector {
        ParamVector(v)
    }

    #[test]
    fn scalar_ridge_examples() {
        let spec = RegularizerSpec::new(RegFamily::ScalarRidge);
        let theta = pv(vec![1.0, 2.0]);
        let v = reg_value(&spec, &RegParams::scalar(0.5), &theta, None).unwrap();
        assert!((v - 1.25).abs() < 1e-15);
        let g = reg_grad(&spec, &RegParams::scalar(0.5), &theta, None).unwrap();
        assert_eq!(g.0, vec![0.5, 1.0]);
        let phi = feature_matrix(&spec, &theta, None).unwrap();
        assert_eq!(phi.0.column(0), vec![1.0, 2.0]);
    }

    #[test]
    fn sym_quadratic_examples() {
        let spec = RegularizerSpec::new(RegFamily::SymQuadratic);
        // Lambda = [[1, 0.5], [0.5, 2]], upper triangle (1, 0.5, 2).
        let params = RegParams(vec![1.0, 0.5, 2.0]);
        let theta = pv(vec![1.0, 1.0]);
        let v = reg_value(&spec, &params, &theta, None).unwrap();
        assert!((v - 4.0).abs() < 1e-15);
        let g = reg_grad(&spec, &params, &theta, None).unwrap();
        assert_eq!(g.0, vec![3.0, 5.0]);
        // Feature matrix: columns (0,0), (0,1), (1,1) -> [[2,2,0],[0,2,2]].
        let phi = feature_matrix(&spec, &theta, None).unwrap();
        assert_eq!(phi.0.row(0), &[2.0, 2.0, 0.0]);
        assert_eq!(phi.0.row(1), &[0.0, 2.0, 2.0]);
    }

    #[test]
    fn smoothed_l1_branch_values() {
        let spec = RegularizerSpec::with_beta(RegFamily::SmoothedL1, 0.001).unwrap();
        // |u| >= beta branch: |0.01| - beta/2 = 0.0095.
        let v = reg_value(&spec, &RegParams::scalar(1.0), &pv(vec![0.01]), None).unwrap();
        assert!((v - 0.0095).abs() < 1e-15);
        // |u| < beta branch: 0.0005 / 0.001 = 0.5.
        let g = reg_grad(&spec, &RegParams::scalar(1.0), &pv(vec![0.0005]), None).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn huber_gradient_continuous_at_seam() {
        let beta = 0.001;
        let spec = RegularizerSpec::with_beta(RegFamily::SmoothedL1, beta).unwrap();
        for sign in [-1.0, 1.0] {
            let at = reg_grad(&spec, &RegParams::scalar(1.0), &pv(vec![sign * beta]), None)
                .unwrap()[0];
            let below = reg_grad(
                &spec,
                &RegParams::scalar(1.0),
                &pv(vec![sign * beta * (1.0 - 1e-12)]),
                None,
            )
            .unwrap()[0];
            assert!((at - sign).abs() < 1e-9);
            assert!((below - sign).abs() < 1e-9);
        }
    }

    #[test]
    fn elastic_net_feature_matrix_example() {
        let spec = RegularizerSpec::with_beta(RegFamily::ElasticNetSmoothed, 0.001).unwrap();
        let theta = pv(vec![0.01, 0.0005]);
        let phi = feature_matrix(&spec, &theta, None).unwrap();
        assert_eq!(phi.0.row(0), &[1.0, 0.02]);
        assert_eq!(phi.0.row(1), &[0.5, 0.001]);
    }

    #[test]
    fn grad_norm_penalty_example() {
        // Linear model with squared-error-half loss on a design chosen so
        // H = diag(1, 2) and g = (1, 1) at theta = 0.
        let spec_model = ModelSpec::linear(2, 1, LossKind::SquaredErrorHalf);
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, std::f64::consts::SQRT_2]]);
        let r0 = 1.0;
        let r1 = 1.0 / std::f64::consts::SQRT_2;
        let y = Matrix::from_rows(&[vec![-r0], vec![-r1]]);
        let data = Dataset { x, y, id: "hg".into() };
        let ctx = RegContext {
            model: &spec_model,
            data: &data,
        };
        let theta = pv(vec![0.0, 0.0]);
        let g = crate::models::loss_grad(&spec_model, &theta, &data, None).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12);

        let reg = RegularizerSpec::new(RegFamily::GradNormPenalty);
        let grad = reg_grad(&reg, &RegParams::scalar(1.0), &theta, Some(&ctx)).unwrap();
        assert!((grad[0] - 1.0).abs() < 1e-12, "{:?}", grad.0);
        assert!((grad[1] - 2.0).abs() < 1e-12);
        let v = reg_value(&reg, &RegParams::scalar(1.0), &theta, Some(&ctx)).unwrap();
        assert!((v - 1.0).abs() < 1e-12); // (1/2)(1 + 1)

        assert!(matches!(
            reg_grad(&reg, &RegParams::scalar(1.0), &theta, None),
            Err(RegError::ContextRequired(_))
        ));
    }

    #[test]
    fn linearity_grad_equals_phi_lambda() {
        let mut rng = RngStream::new(2, "lin");
        let p = 6;
        let theta = pv(rng.normal_vec(p));
        let families = [
            RegFamily::ScalarRidge,
            RegFamily::DiagQuadratic,
            RegFamily::SymQuadratic,
            RegFamily::SmoothedL1,
            RegFamily::ElasticNetSmoothed,
        ];
        for family in families {
            let spec = RegularizerSpec::new(family);
            let r = spec.param_len(p);
            let phi = feature_matrix(&spec, &theta, None).unwrap();
            for _ in 0..4 {
                let a = rng.normal();
                let b = rng.normal();
                let l1 = RegParams(rng.normal_vec(r));
                let l2 = RegParams(rng.normal_vec(r));
                let combo = RegParams(
                    l1.0.iter().zip(&l2.0).map(|(x, y)| a * x + b * y).collect(),
                );
                let g1 = reg_grad(&spec, &l1, &theta, None).unwrap();
                let g2 = reg_grad(&spec, &l2, &theta, None).unwrap();
                let gc = reg_grad(&spec, &combo, &theta, None).unwrap();
                let lin = g1.scale(a).add_scaled(b, &g2);
                let err = gc.sub(&lin).norm();
                assert!(err < 1e-12 * gc.norm().max(1.0), "{family:?} err {err}");
                // grad == Phi * Lambda
                let phil = ParamVector(phi.0.matvec(l1.as_slice()));
                let err2 = g1.sub(&phil).norm();
                assert!(err2 < 1e-12 * g1.norm().max(1.0), "{family:?} phi err {err2}");
            }
        }
    }

    #[test]
    fn reg_grad_matches_finite_differences() {
        let mut rng = RngStream::new(5, "fd");
        let p = 8;
        let beta = 0.001;
        let families = [
            RegFamily::ScalarRidge,
            RegFamily::DiagQuadratic,
            RegFamily::SymQuadratic,
            RegFamily::SmoothedL1,
            RegFamily::ElasticNetSmoothed,
        ];
        for family in families {
            let spec = RegularizerSpec::with_beta(family, beta).unwrap();
            let r = spec.param_len(p);
            let params = RegParams(rng.normal_vec(r));
            // Keep coordinates off the Huber seam by a wide margin relative to
            // the finite-difference step.
            let theta = pv((0..p)
                .map(|_| {
                    let mut t = rng.normal();
                    while (t.abs() - beta).abs() < 20.0 * beta * 1e-3 {
                        t = rng.normal();
                    }
                    t
                })
                .collect());
            let g = reg_grad(&spec, &params, &theta, None).unwrap();
            let mut fd = vec![0.0; p];
            for i in 0..p {
                let h = 1e-6 * theta[i].abs().max(1.0);
                let mut plus = theta.clone();
                plus.0[i] += h;
                let mut minus = theta.clone();
                minus.0[i] -= h;
                let vp = reg_value(&spec, &params, &plus, None).unwrap();
                let vm = reg_value(&spec, &params, &minus, None).unwrap();
                fd[i] = (vp - vm) / (2.0 * h);
            }
            let fd = ParamVector(fd);
            let err = g.sub(&fd).norm() / fd.norm().max(1e-12);
            assert!(err < 1e-6, "{family:?} fd err {err}");
        }
    }

    #[test]
    fn sym_quadratic_psd_value_nonnegative() {
        let mut rng = RngStream::new(7, "psd");
        let p = 5;
        // Lambda = B^T B is PSD.
        let b = Matrix::from_vec(p, p, rng.normal_vec(p * p));
        let m = b.transpose().matmul(&b);
        let mut params = vec![0.0; p * (p + 1) / 2];
        for i in 0..p {
            for j in i..p {
                params[upper_tri_index(p, i, j)] = m.get(i, j);
            }
        }
        let spec = RegularizerSpec::new(RegFamily::SymQuadratic);
        let params = RegParams(params);
        for _ in 0..10 {
            let theta = pv(rng.normal_vec(p));
            let v = reg_value(&spec, &params, &theta, None).unwrap();
            assert!(v >= -1e-12);
        }
        // Equality iff Lambda theta = 0.
        let singular = RegParams({
            let mut q = vec![0.0; 3];
            q[upper_tri_index(2, 0, 0)] = 1.0;
            q
        });
        let theta = pv(vec![0.0, 3.0]);
        let v = reg_value(&spec, &singular, &theta, None).unwrap();
        assert_eq!(v, 0.0);
        let g = reg_grad(&spec, &singular, &theta, None).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn wrong_param_length_rejected() {
        let spec = RegularizerSpec::new(RegFamily::DiagQuadratic);
        let theta = pv(vec![1.0, 2.0, 3.0]);
        let bad = RegParams(vec![1.0]);
        assert!(matches!(
            reg_value(&spec, &bad, &theta, None),
            Err(RegError::BadParams(_))
        ));
    }
}
