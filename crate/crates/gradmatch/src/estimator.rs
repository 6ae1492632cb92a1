//! Gradient-matching estimation: assemble regression systems from training
//! endpoints or trajectories, fit regularizer parameters by minimum-norm
//! least squares or adaptive-moment descent, fit the gradient-penalty scalar,
//! and validate estimates by retraining.
//!
//! The regression being solved is `Phi Lambda ~ b`, where `b` stacks
//! negative loss gradients (or per-step update deviations) and `Phi` stacks
//! the per-parameter gradients of each candidate regularizer. Each endpoint or
//! trajectory point contributes one block of `p` rows; stacking blocks from
//! diverse endpoints is what makes over-parametrized families identifiable.

use serde::Serialize;
use thiserror::Error;

use crate::flowref::{self, FlowError};
use crate::models::{self, ModelError, ModelSpec, ParamVector};
use crate::numkernel::{self, cond_number, lstsq_min_norm, sym_eig, Matrix, NumError};
use crate::regfam::{
    self, materialize_quadratic, RegError, RegFamily, RegParams, RegularizerSpec,
};
use crate::synthdata::Dataset;
use crate::training::{self, TrainConfig, TrainingError};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("estimation system has no rows")]
    EmptySystem,
    #[error("mismatched systems: {0}")]
    Mismatch(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate system: {0}")]
    Degenerate(String),
    #[error("iterative fit diverged: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Provenance of one block of stacked rows.
#[derive(Clone, Debug)]
pub struct BlockTag {
    pub label: String,
    pub rows: usize,
}

/// Stacked gradient-matching regression `Phi Lambda ~ b`.
#[derive(Clone, Debug)]
pub struct EstimationSystem {
    pub phi: Matrix,
    pub b: Vec<f64>,
    pub reg: RegularizerSpec,
    /// Model parameter count of each contributing block.
    pub p: usize,
    pub blocks: Vec<BlockTag>,
}

impl EstimationSystem {
    pub fn rows(&self) -> usize {
        self.phi.rows()
    }

    pub fn num_params(&self) -> usize {
        self.phi.cols()
    }

    /// Sample-weight hook: rescales one block's rows by `sqrt(weight)`, so the
    /// block contributes `weight` times its squared-error mass to the
    /// objective. No default weighting is applied anywhere; callers opt in.
    pub fn scale_block(&mut self, block: usize, weight: f64) {
        assert!(weight >= 0.0, "block weight must be nonnegative");
        let start: usize = self.blocks[..block].iter().map(|t| t.rows).sum();
        let rows = self.blocks[block].rows;
        let s = weight.sqrt();
        for r in start..start + rows {
            self.b[r] *= s;
            for c in 0..self.phi.cols() {
                self.phi.set(r, c, self.phi.get(r, c) * s);
            }
        }
    }
}

/// The gradient-matching target at a trained endpoint: `-grad L(theta)` on
/// the full dataset with dropout disabled.
pub fn endpoint_target(
    model: &ModelSpec,
    data: &Dataset,
    theta: &ParamVector,
) -> Result<Vec<f64>, EstimatorError> {
    let g = models::loss_grad(model, theta, data, None)?;
    Ok(g.as_slice().iter().map(|v| -v).collect())
}

/// Builds the one-endpoint system: features of `reg` at `theta` against the
/// endpoint target.
pub fn endpoint_system(
    reg: &RegularizerSpec,
    model: &ModelSpec,
    data: &Dataset,
    theta: &ParamVector,
) -> Result<EstimationSystem, EstimatorError> {
    let b = endpoint_target(model, data, theta)?;
    let ctx = regfam::RegContext { model, data };
    let phi = regfam::feature_matrix(reg, theta, Some(&ctx))?;
    Ok(EstimationSystem {
        phi: phi.0,
        b,
        reg: reg.clone(),
        p: theta.len(),
        blocks: vec![BlockTag {
            label: format!("endpoint({})", data.id),
            rows: theta.len(),
        }],
    })
}

/// Which unregularized reference a trajectory deviation is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryReference {
    /// `b_t = -(theta_{t+1} - theta_t)/eta - grad L(theta_t)`; requires
    /// consecutive recorded steps.
    Euler,
    /// Per-unit-time discrepancy between one full-batch GD step (re-derived
    /// deterministically from `theta_t`) and the RK4 gradient flow.
    Flow,
}

/// Per-point gradient-matching targets along a trajectory.
pub fn trajectory_targets(
    model: &ModelSpec,
    data: &Dataset,
    traj: &training::Trajectory,
    reference: TrajectoryReference,
    substeps: usize,
) -> Result<Vec<(ParamVector, Vec<f64>)>, EstimatorError> {
    match reference {
        TrajectoryReference::Euler => {
            if traj.points.len() < 2 {
                return Err(EstimatorError::InsufficientData(
                    "euler trajectory targets need at least two recorded points".into(),
                ));
            }
            let mut out = Vec::new();
            for pair in traj.points.windows(2) {
                let (t0, theta0) = (&pair[0].0, &pair[0].1);
                let (t1, theta1) = (&pair[1].0, &pair[1].1);
                if t1 - t0 != 1 {
                    return Err(EstimatorError::InsufficientData(format!(
                        "euler targets need consecutive steps, got {t0} -> {t1}"
                    )));
                }
                let g = models::loss_grad(model, theta0, data, None)?;
                let delta = theta1.sub(theta0);
                let b: Vec<f64> = delta
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(d, gi)| -d / traj.eta - gi)
                    .collect();
                out.push((theta0.clone(), b));
            }
            Ok(out)
        }
        TrajectoryReference::Flow => {
            let mut out = Vec::new();
            for (_, theta) in &traj.points {
                let t = flowref::gd_flow_discrepancy(model, theta, data, traj.eta, substeps)?;
                out.push((theta.clone(), t.0));
            }
            Ok(out)
        }
    }
}

/// Stacks per-point trajectory targets into one estimation system.
pub fn trajectory_system(
    reg: &RegularizerSpec,
    model: &ModelSpec,
    data: &Dataset,
    traj: &training::Trajectory,
    reference: TrajectoryReference,
    substeps: usize,
) -> Result<EstimationSystem, EstimatorError> {
    let targets = trajectory_targets(model, data, traj, reference, substeps)?;
    let mut systems = Vec::new();
    let ctx = regfam::RegContext { model, data };
    for (i, (theta, b)) in targets.into_iter().enumerate() {
        let phi = regfam::feature_matrix(reg, &theta, Some(&ctx))?;
        systems.push(EstimationSystem {
            phi: phi.0,
            b,
            reg: reg.clone(),
            p: theta.len(),
            blocks: vec![BlockTag {
                label: format!("trajectory-point({i})"),
                rows: theta.len(),
            }],
        });
    }
    stack(systems)
}

/// Row-wise concatenation of systems sharing a family and parameter count.
/// Fitting the stacked system minimizes the sum of the per-block objectives.
pub fn stack(systems: Vec<EstimationSystem>) -> Result<EstimationSystem, EstimatorError> {
    let mut iter = systems.into_iter();
    let mut acc = iter.next().ok_or(EstimatorError::EmptySystem)?;
    for sys in iter {
        if sys.num_params() != acc.num_params() {
            return Err(EstimatorError::Mismatch(format!(
                "cannot stack systems with r={} and r={}",
                acc.num_params(),
                sys.num_params()
            )));
        }
        if sys.reg.family != acc.reg.family {
            return Err(EstimatorError::Mismatch(format!(
                "cannot stack {} with {}",
                acc.reg.family.name(),
                sys.reg.family.name()
            )));
        }
        let mut data = Vec::with_capacity((acc.rows() + sys.rows()) * acc.num_params());
        data.extend_from_slice(acc.phi.data());
        data.extend_from_slice(sys.phi.data());
        acc.phi = Matrix::from_vec(acc.rows() + sys.rows(), acc.num_params(), data);
        acc.b.extend_from_slice(&sys.b);
        acc.blocks.extend(sys.blocks);
    }
    Ok(acc)
}

/// Conditioning and identifiability diagnostics attached to every estimate.
#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    /// Condition number of the raw feature matrix (sentinel `f64::MAX` when
    /// rank-deficient).
    pub cond: f64,
    pub column_norms: Vec<f64>,
    pub rank: usize,
    /// Minimum eigenvalue of the materialized quadratic form, for the
    /// diag-/sym-quadratic families.
    pub min_eig: Option<f64>,
    /// Columns with zero norm (their coefficients are pinned to 0 when
    /// normalization is on).
    pub zero_columns: Vec<usize>,
}

/// A fitted parameter vector with its residual and diagnostics.
#[derive(Clone, Debug)]
pub struct EstimateResult {
    pub params: RegParams,
    /// `(1/rows) ||Phi Lambda - b||^2`.
    pub residual_mse: f64,
    pub diagnostics: Diagnostics,
    pub family: RegFamily,
    pub p: usize,
}

#[derive(Serialize)]
struct EstimateSummary<'a> {
    family: &'a str,
    lambda: &'a [f64],
    residual_mse: f64,
    cond: f64,
    rank: usize,
    min_eig: Option<f64>,
}

impl EstimateResult {
    /// JSON summary record (keys: family, lambda, residual_mse, cond, rank,
    /// min_eig).
    pub fn to_json(&self) -> String {
        serde_json::to_string(&EstimateSummary {
            family: self.family.name(),
            lambda: self.params.as_slice(),
            residual_mse: self.residual_mse,
            cond: self.diagnostics.cond,
            rank: self.diagnostics.rank,
            min_eig: self.diagnostics.min_eig,
        })
        .expect("estimate summary serializes")
    }

    /// Materialized quadratic-form matrix for diag-/sym-quadratic fits.
    pub fn quadratic_matrix(&self) -> Option<Matrix> {
        materialize_quadratic(
            &RegularizerSpec::new(self.family),
            &self.params,
            self.p,
        )
    }
}

fn residual_mse(phi: &Matrix, params: &[f64], b: &[f64]) -> f64 {
    let pred = phi.matvec(params);
    let rows = b.len().max(1);
    pred.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / rows as f64
}

fn min_eig_of(reg: &RegularizerSpec, params: &RegParams, p: usize) -> Option<f64> {
    match reg.family {
        RegFamily::DiagQuadratic => params
            .as_slice()
            .iter()
            .cloned()
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |x| x.min(v)))),
        RegFamily::SymQuadratic => {
            let m = materialize_quadratic(reg, params, p)?;
            sym_eig(&m).ok().map(|e| e.eigenvalues[0])
        }
        _ => None,
    }
}

fn build_result(
    system: &EstimationSystem,
    params: Vec<f64>,
    rank: usize,
    zero_columns: Vec<usize>,
) -> EstimateResult {
    let column_norms: Vec<f64> = (0..system.num_params())
        .map(|c| numkernel::norm2(&system.phi.column(c)))
        .collect();
    let params = RegParams(params);
    EstimateResult {
        residual_mse: residual_mse(&system.phi, params.as_slice(), &system.b),
        diagnostics: Diagnostics {
            cond: cond_number(&system.phi),
            column_norms,
            rank,
            min_eig: min_eig_of(&system.reg, &params, system.p),
            zero_columns,
        },
        family: system.reg.family,
        p: system.p,
        params,
    }
}

/// Minimum-norm least-squares fit of the gradient-matching system.
///
/// With `normalize` on, each feature column is rescaled to unit norm before
/// solving and the coefficient is mapped back by the same scale, which
/// stabilizes families whose candidate gradients differ wildly in magnitude.
/// Zero-norm columns get coefficient 0 and are flagged in the diagnostics.
/// Rank deficiency is diagnosed, never fatal.
pub fn fit_linear(
    system: &EstimationSystem,
    normalize: bool,
) -> Result<EstimateResult, EstimatorError> {
    if system.rows() == 0 {
        return Err(EstimatorError::EmptySystem);
    }
    let r = system.num_params();
    if !normalize {
        let sol = lstsq_min_norm(&system.phi, &system.b)?;
        return Ok(build_result(system, sol.x, sol.rank, Vec::new()));
    }
    let norms: Vec<f64> = (0..r)
        .map(|c| numkernel::norm2(&system.phi.column(c)))
        .collect();
    let zero_columns: Vec<usize> = (0..r).filter(|&c| norms[c] == 0.0).collect();
    let mut scaled = Matrix::zeros(system.rows(), r);
    for c in 0..r {
        if norms[c] == 0.0 {
            continue;
        }
        for row in 0..system.rows() {
            scaled.set(row, c, system.phi.get(row, c) / norms[c]);
        }
    }
    let sol = lstsq_min_norm(&scaled, &system.b)?;
    let params: Vec<f64> = (0..r)
        .map(|c| if norms[c] == 0.0 { 0.0 } else { sol.x[c] / norms[c] })
        .collect();
    Ok(build_result(system, params, sol.rank, zero_columns))
}

/// Options for the adaptive-moment iterative fit. Defaults: step `1e-2`,
/// plateau patience 50 with any decrease counting, moment constants
/// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Clone, Debug)]
pub struct IterativeOpts {
    pub step: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for IterativeOpts {
    fn default() -> Self {
        IterativeOpts {
            step: 1e-2,
            max_epochs: 20_000,
            patience: 50,
            min_delta: 0.0,
        }
    }
}

/// Fits the gradient-matching objective `(1/rows) ||Phi Lambda - b||^2` by
/// adaptive-moment gradient descent from `Lambda = 0`, stopping on plateau.
/// On well-conditioned systems of linear families this agrees with
/// [`fit_linear`] to high accuracy; it exists as the independent, generic
/// optimization route.
pub fn fit_iterative(
    system: &EstimationSystem,
    opts: &IterativeOpts,
) -> Result<EstimateResult, EstimatorError> {
    if system.rows() == 0 {
        return Err(EstimatorError::EmptySystem);
    }
    let r = system.num_params();
    let rows = system.rows() as f64;
    let objective = |params: &[f64]| -> f64 { residual_mse(&system.phi, params, &system.b) };
    let gradient = |params: &[f64]| -> Vec<f64> {
        let pred = system.phi.matvec(params);
        let resid: Vec<f64> = pred.iter().zip(&system.b).map(|(p, q)| p - q).collect();
        system
            .phi
            .tr_matvec(&resid)
            .into_iter()
            .map(|v| 2.0 * v / rows)
            .collect()
    };
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut params = vec![0.0; r];
    let mut m = vec![0.0; r];
    let mut v = vec![0.0; r];
    let mut best = params.clone();
    let mut best_obj = objective(&params);
    let mut streak = 0usize;
    for epoch in 1..=opts.max_epochs {
        let g = gradient(&params);
        for i in 0..r {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - beta1.powi(epoch as i32));
            let v_hat = v[i] / (1.0 - beta2.powi(epoch as i32));
            params[i] -= opts.step * m_hat / (v_hat.sqrt() + eps);
        }
        let obj = objective(&params);
        if !obj.is_finite() {
            return Err(EstimatorError::NonFinite(format!(
                "objective became non-finite at epoch {epoch}"
            )));
        }
        let improvement = best_obj - obj;
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&params);
        }
        if improvement > opts.min_delta {
            streak = 0;
        } else {
            streak += 1;
            if streak >= opts.patience {
                break;
            }
        }
    }
    // Rank is reported from the same SVD analysis the closed form would use.
    let sol = lstsq_min_norm(&system.phi, &system.b)?;
    Ok(build_result(system, best, sol.rank, Vec::new()))
}

/// One observation for the gradient-penalty coefficient fit: the
/// Hessian-gradient product and the measured per-unit-time discrepancy at the
/// same point.
#[derive(Clone, Debug)]
pub struct IgrSample {
    pub hg: Vec<f64>,
    pub discrepancy: Vec<f64>,
}

/// Closed-form scalar fit of the gradient-penalty coefficient:
/// `lambda / p = (1/2) sum_t <Hg_t, T_t> / sum_t ||Hg_t||^2`, returned as
/// `lambda` (multiplied back by `p`).
pub fn igr_fit(samples: &[IgrSample], p: usize) -> Result<f64, EstimatorError> {
    if samples.is_empty() {
        return Err(EstimatorError::Degenerate(
            "gradient-penalty fit needs at least one sample".into(),
        ));
    }
    let mut inner = 0.0;
    let mut norm2 = 0.0;
    for s in samples {
        if s.hg.len() != s.discrepancy.len() {
            return Err(EstimatorError::Mismatch(format!(
                "sample dims differ: {} vs {}",
                s.hg.len(),
                s.discrepancy.len()
            )));
        }
        inner += numkernel::dot(&s.hg, &s.discrepancy);
        norm2 += numkernel::dot(&s.hg, &s.hg);
    }
    if norm2 == 0.0 {
        return Err(EstimatorError::Degenerate(
            "all Hessian-gradient products are zero".into(),
        ));
    }
    Ok(p as f64 * 0.5 * inner / norm2)
}

/// Outcome of retraining with the estimated explicit regularizer.
#[derive(Clone, Debug)]
pub struct RetrainReport {
    pub theta: ParamVector,
    /// `||theta_retrained - theta_orig|| / ||theta_orig||`.
    pub rel_distance: f64,
    /// Absolute difference of the unregularized training loss between the
    /// retrained and original weights.
    pub loss_gap: f64,
}

/// Retrains the model on `L + R(., params)` with the given config (callers
/// configure full convergence; the training feature under study, such as
/// early stopping, must not be part of `cfg`) and compares the result to the
/// original endpoint.
pub fn retrain_validate(
    model: &ModelSpec,
    data: &Dataset,
    reg: &RegularizerSpec,
    params: &RegParams,
    cfg: &TrainConfig,
    theta_orig: &ParamVector,
) -> Result<RetrainReport, EstimatorError> {
    let (endpoint, _) = training::train(model, data, cfg, Some((reg, params)))?;
    let rel_distance = endpoint.theta.sub(theta_orig).norm() / theta_orig.norm().max(1e-300);
    let orig_loss = models::loss_value(model, theta_orig, data, None)?;
    let new_loss = models::loss_value(model, &endpoint.theta, data, None)?;
    Ok(RetrainReport {
        theta: endpoint.theta,
        rel_distance,
        loss_gap: (new_loss - orig_loss).abs(),
    })
}
