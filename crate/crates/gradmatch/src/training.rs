//! Optimizers (full-batch GD, minibatch SGD with heavy-ball momentum), early
//! stopping, trajectory recording, and training with optional explicit
//! regularizers.
//!
//! Early stopping semantics: the monitored objective is the deterministic
//! (mask-free) training loss plus the explicit regularizer value, evaluated on
//! the full training set at the end of every epoch. Training stops when the
//! objective has failed to improve on its best value by more than `min_delta`
//! for `patience` consecutive epochs (`min_delta = 0` means any strict
//! decrease counts as improvement). The returned endpoint is the best-loss
//! iterate seen, not necessarily the last.
//!
//! Initialization: linear models start at exactly zero; MLPs draw weights
//! uniformly on `+- sqrt(6 / (fan_in + fan_out))` with zero biases, seeded.
//! Momentum is classical heavy-ball on the raw gradient:
//! `v <- m v + g; theta <- theta - eta v`.

use std::path::PathBuf;

use thiserror::Error;

use crate::models::{
    self, save_checkpoint, sample_dropout_mask, ModelError, ModelKind, ModelSpec, ParamVector,
};
use crate::regfam::{self, RegError, RegParams, RegularizerSpec};
use crate::rng::RngStream;
use crate::synthdata::Dataset;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training diverged (non-finite objective) at step {step}")]
    Divergence { step: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reg(#[from] RegError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Gd,
    Sgd,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum objective decrease that counts as improvement (0 = any).
    pub min_delta: f64,
    /// Steps at which the trajectory records the iterate (step 0 and the
    /// endpoint are always recorded).
    pub checkpoint_steps: Vec<usize>,
    pub seed: u64,
    /// When set, iterates at `checkpoint_steps` are also written as
    /// checkpoint files `step_<t>.ckpt` in this directory.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Full-batch GD with plateau-based early stopping.
    pub fn gd(eta: f64, max_epochs: usize, patience: usize, min_delta: f64, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Gd,
            eta,
            momentum: 0.0,
            batch_size: 0,
            max_epochs,
            patience,
            min_delta,
            checkpoint_steps: Vec::new(),
            seed,
            checkpoint_dir: None,
        }
    }

    /// Full-batch GD run for exactly `steps` epochs (patience never triggers
    /// before the step budget on descending objectives).
    pub fn gd_fixed_steps(eta: f64, steps: usize, seed: u64) -> Self {
        TrainConfig::gd(eta, steps, steps, 0.0, seed)
    }

    /// Minibatch SGD with momentum.
    pub fn sgd(
        eta: f64,
        momentum: f64,
        batch_size: usize,
        max_epochs: usize,
        patience: usize,
        min_delta: f64,
        seed: u64,
    ) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            eta,
            momentum,
            batch_size,
            max_epochs,
            patience,
            min_delta,
            checkpoint_steps: Vec::new(),
            seed,
            checkpoint_dir: None,
        }
    }

    pub fn with_checkpoints(mut self, steps: Vec<usize>) -> Self {
        self.checkpoint_steps = steps;
        self
    }

    fn validate(&self, n: usize) -> Result<(), TrainingError> {
        if self.eta <= 0.0 {
            return Err(TrainingError::Config(format!(
                "step size must be positive, got {}",
                self.eta
            )));
        }
        if self.max_epochs == 0 {
            return Err(TrainingError::Config("max_epochs must be >= 1".into()));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(TrainingError::Config(format!(
                "patience must lie in 1..=max_epochs (got {} with max_epochs {})",
                self.patience, self.max_epochs
            )));
        }
        if self.optimizer == OptimizerKind::Sgd && (self.batch_size == 0 || self.batch_size > n) {
            return Err(TrainingError::Config(format!(
                "sgd batch_size must lie in 1..=n (got {} with n {})",
                self.batch_size, n
            )));
        }
        Ok(())
    }
}

/// Trained weights plus where and how the run stopped.
#[derive(Clone, Debug)]
pub struct EndpointRecord {
    pub theta: ParamVector,
    pub stop_step: usize,
    pub final_loss: f64,
    pub dataset_id: String,
    pub spec_id: String,
}

/// Recorded iterates `(step, theta)` with strictly increasing steps;
/// `theta_0` is always present.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub points: Vec<(usize, ParamVector)>,
    pub eta: f64,
    pub rule: String,
}

impl Trajectory {
    pub fn theta_at(&self, step: usize) -> Option<&ParamVector> {
        self.points
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, theta)| theta)
    }

    fn insert(&mut self, step: usize, theta: ParamVector) {
        match self.points.binary_search_by_key(&step, |(s, _)| *s) {
            Ok(_) => {}
            Err(pos) => self.points.insert(pos, (step, theta)),
        }
    }
}

/// One full-batch gradient-descent step `theta - eta (grad L + grad R)`.
/// The loss gradient is deterministic (no dropout mask).
pub fn gd_step(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    eta: f64,
    explicit_reg: Option<(&RegularizerSpec, &RegParams)>,
) -> Result<ParamVector, TrainingError> {
    let mut g = models::loss_grad(spec, theta, data, None)?;
    if let Some((reg_spec, params)) = explicit_reg {
        let ctx = regfam::RegContext { model: spec, data };
        let rg = regfam::reg_grad(reg_spec, params, theta, Some(&ctx))?;
        g = g.add_scaled(1.0, &rg);
    }
    Ok(theta.add_scaled(-eta, &g))
}

/// Velocity and epoch counter for minibatch SGD.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub velocity: ParamVector,
    pub epoch: usize,
}

impl SgdState {
    pub fn new(p: usize) -> Self {
        SgdState {
            velocity: ParamVector::zeros(p),
            epoch: 0,
        }
    }
}

/// One epoch of minibatch SGD with momentum. The row permutation is seeded
/// per epoch and dropout masks are resampled per batch; when the batch covers
/// the whole dataset no shuffle is applied, so `batch_size = n`,
/// `momentum = 0`, no dropout reduces to `gd_step` bit for bit. Explicit
/// regularizer gradients (evaluated on the full dataset context) ride along
/// with every batch gradient.
pub fn sgd_epoch(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    state: &mut SgdState,
    explicit_reg: Option<(&RegularizerSpec, &RegParams)>,
) -> Result<ParamVector, TrainingError> {
    let n = data.n();
    let epoch = state.epoch;
    state.epoch += 1;
    let full_batch = cfg.batch_size >= n;
    let order: Vec<usize> = if full_batch {
        (0..n).collect()
    } else {
        let mut perm: Vec<usize> = (0..n).collect();
        RngStream::new(cfg.seed, &format!("sgd-shuffle/e{epoch}")).shuffle(&mut perm);
        perm
    };
    let mut theta = theta.clone();
    for (batch_idx, rows) in order.chunks(cfg.batch_size.max(1)).enumerate() {
        let batch = if full_batch {
            data.clone()
        } else {
            data.subset(rows, format!("{}|batch", data.id))
        };
        let mask = if spec.dropout_rate > 0.0 {
            let seed =
                RngStream::new(cfg.seed, &format!("mask-seed/e{epoch}/b{batch_idx}")).next_u64();
            Some(sample_dropout_mask(spec, seed))
        } else {
            None
        };
        let mut g = models::loss_grad(spec, &theta, &batch, mask.as_ref())?;
        if let Some((reg_spec, params)) = explicit_reg {
            let ctx = regfam::RegContext { model: spec, data };
            let rg = regfam::reg_grad(reg_spec, params, &theta, Some(&ctx))?;
            g = g.add_scaled(1.0, &rg);
        }
        state.velocity = state.velocity.scale(cfg.momentum).add_scaled(1.0, &g);
        theta = theta.add_scaled(-cfg.eta, &state.velocity);
        if !theta.all_finite() {
            return Err(TrainingError::Divergence { step: epoch + 1 });
        }
    }
    Ok(theta)
}

/// Trains a model, returning the best-loss endpoint and the recorded
/// trajectory.
pub fn train(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    explicit_reg: Option<(&RegularizerSpec, &RegParams)>,
) -> Result<(EndpointRecord, Trajectory), TrainingError> {
    cfg.validate(data.n())?;
    let theta0 = match spec.kind {
        ModelKind::Linear => ParamVector::zeros(spec.param_count()),
        ModelKind::Mlp => models::init_params(spec, cfg.seed),
    };
    let objective = |theta: &ParamVector| -> Result<f64, TrainingError> {
        let mut obj = models::loss_value(spec, theta, data, None)?;
        if let Some((reg_spec, params)) = explicit_reg {
            let ctx = regfam::RegContext { model: spec, data };
            obj += regfam::reg_value(reg_spec, params, theta, Some(&ctx))?;
        }
        Ok(obj)
    };

    let rule = match cfg.optimizer {
        OptimizerKind::Gd => "gd".to_string(),
        OptimizerKind::Sgd => format!(
            "sgd(momentum={},batch_size={})",
            cfg.momentum, cfg.batch_size
        ),
    };
    let mut trajectory = Trajectory {
        points: vec![(0, theta0.clone())],
        eta: cfg.eta,
        rule,
    };
    emit_checkpoint(spec, cfg, 0, &theta0)?;

    let obj0 = objective(&theta0)?;
    if !obj0.is_finite() {
        return Err(TrainingError::Divergence { step: 0 });
    }
    let mut best_theta = theta0.clone();
    let mut best_obj = obj0;
    let mut best_step = 0usize;
    let mut streak = 0usize;
    let mut theta = theta0;
    let mut sgd_state = SgdState::new(spec.param_count());
    for epoch in 1..=cfg.max_epochs {
        theta = match cfg.optimizer {
            OptimizerKind::Gd => gd_step(spec, &theta, data, cfg.eta, explicit_reg)?,
            OptimizerKind::Sgd => {
                sgd_epoch(spec, &theta, data, cfg, &mut sgd_state, explicit_reg)?
            }
        };
        let obj = objective(&theta)?;
        if !obj.is_finite() {
            return Err(TrainingError::Divergence { step: epoch });
        }
        let improvement = best_obj - obj;
        if obj < best_obj {
            best_obj = obj;
            best_theta = theta.clone();
            best_step = epoch;
        }
        if improvement > cfg.min_delta {
            streak = 0;
        } else {
            streak += 1;
        }
        if cfg.checkpoint_steps.contains(&epoch) {
            trajectory.insert(epoch, theta.clone());
            emit_checkpoint(spec, cfg, epoch, &theta)?;
        }
        if streak >= cfg.patience {
            break;
        }
    }

    trajectory.insert(best_step, best_theta.clone());
    let endpoint = EndpointRecord {
        theta: best_theta,
        stop_step: best_step,
        final_loss: best_obj,
        dataset_id: data.id.clone(),
        spec_id: spec.to_string(),
    };
    Ok((endpoint, trajectory))
}

fn emit_checkpoint(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    step: usize,
    theta: &ParamVector,
) -> Result<(), TrainingError> {
    if let Some(dir) = &cfg.checkpoint_dir {
        if cfg.checkpoint_steps.contains(&step) {
            let path = dir.join(format!("step_{step:06}.ckpt"));
            save_checkpoint(&path, spec, theta)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, LossKind};
    use crate::numkernel::{sym_eig, Matrix};
    use crate::regfam::RegFamily;
    use crate::synthdata::{gen_linear, LinearGenConfig};

    fn scalar_quadratic_data() -> (ModelSpec, Dataset) {
        // L(theta) = (1/2) theta^2 via squared-error-half on X = [1], y = 0.
        let spec = ModelSpec::linear(1, 1, LossKind::SquaredErrorHalf);
        let data = Dataset {
            x: Matrix::from_rows(&[vec![1.0]]),
            y: Matrix::from_rows(&[vec![0.0]]),
            id: "scalar".into(),
        };
        (spec, data)
    }

    #[test]
    fn gd_step_scalar_example() {
        let (spec, data) = scalar_quadratic_data();
        let theta = ParamVector(vec![1.0]);
        let next = gd_step(&spec, &theta, &data, 0.1, None).unwrap();
        assert!((next[0] - 0.9).abs() < 1e-15);
        let frozen = gd_step(&spec, &theta, &data, 0.0, None).unwrap();
        assert_eq!(frozen[0], 1.0);
    }

    #[test]
    fn explicit_ridge_converges_to_closed_form() {
        // X = I_2, y = (1, 0), squared-error-half + scalar ridge lambda = 1
        // has optimum y / (1 + lambda) = (0.5, 0).
        let spec = ModelSpec::linear(2, 1, LossKind::SquaredErrorHalf);
        let data = Dataset {
            x: Matrix::identity(2),
            y: Matrix::from_rows(&[vec![1.0], vec![0.0]]),
            id: "ridge".into(),
        };
        let reg = RegularizerSpec::new(RegFamily::ScalarRidge);
        let params = RegParams::scalar(1.0);
        let cfg = TrainConfig::gd(0.3, 5000, 50, 0.0, 0);
        let (end, _) = train(&spec, &data, &cfg, Some((&reg, &params))).unwrap();
        assert!((end.theta[0] - 0.5).abs() < 1e-7, "{:?}", end.theta.0);
        assert!(end.theta[1].abs() < 1e-7);
    }

    #[test]
    fn gd_iterates_match_analytic_recursion() {
        // theta_t = V (I - (I - eta S)^t) S^+ V^T (1/n) X^T y for
        // half-mse-normalized loss from theta_0 = 0.
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 200,
            d: 6,
            coef_std: 3.0,
            noise_std: 1.0,
            seed: 13,
        })
        .unwrap();
        let spec = ModelSpec::linear(6, 1, LossKind::HalfMseNormalized);
        let eta = 0.05;
        let sigma = data.x.gram_scaled(data.n() as f64);
        let eig = sym_eig(&sigma).unwrap();
        let y0 = data.y.column(0);
        let xty: Vec<f64> = data.x.tr_matvec(&y0).iter().map(|v| v / data.n() as f64).collect();
        let steps = [1usize, 5, 50];
        let cfg = TrainConfig::gd_fixed_steps(eta, 50, 0).with_checkpoints(steps.to_vec());
        let (_, traj) = train(&spec, &data, &cfg, None).unwrap();
        for &t in &steps {
            let theta_t = traj.theta_at(t).expect("checkpoint recorded");
            // Analytic iterate assembled in the eigenbasis.
            let mut expected = vec![0.0; 6];
            for k in 0..6 {
                let s = eig.eigenvalues[k];
                let vk = eig.eigenvectors.column(k);
                let c = crate::numkernel::dot(&vk, &xty);
                let factor = if s.abs() < 1e-14 {
                    eta * t as f64 // limit of (1 - (1 - eta s)^t) / s
                } else {
                    (1.0 - (1.0 - eta * s).powi(t as i32)) / s
                };
                for i in 0..6 {
                    expected[i] += factor * c * vk[i];
                }
            }
            let got = theta_t.as_slice();
            let diff: f64 = got
                .iter()
                .zip(&expected)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale = expected.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-10, "step {t}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn immediate_plateau_stops_at_step_one() {
        let (spec, data) = scalar_quadratic_data();
        let mut cfg = TrainConfig::gd(0.1, 100, 1, f64::MAX, 0);
        cfg.min_delta = f64::MAX;
        let (end, _) = train(&spec, &data, &cfg, None).unwrap();
        assert!(end.stop_step <= 1);
    }

    #[test]
    fn divergence_reported_with_step() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 50,
            d: 3,
            coef_std: 1.0,
            noise_std: 0.1,
            seed: 3,
        })
        .unwrap();
        let spec = ModelSpec::linear(3, 1, LossKind::HalfMseNormalized);
        let cfg = TrainConfig::gd_fixed_steps(1e4, 2000, 0);
        match train(&spec, &data, &cfg, None) {
            Err(TrainingError::Divergence { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sgd_full_batch_reduces_to_gd() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 40,
            d: 4,
            coef_std: 2.0,
            noise_std: 0.5,
            seed: 8,
        })
        .unwrap();
        let spec = ModelSpec::linear(4, 1, LossKind::HalfMseNormalized);
        let mut sgd_cfg = TrainConfig::sgd(0.05, 0.0, 40, 20, 20, 0.0, 5);
        sgd_cfg.checkpoint_steps = (1..=20).collect();
        let gd_cfg = TrainConfig::gd_fixed_steps(0.05, 20, 5).with_checkpoints((1..=20).collect());
        let (_, sgd_traj) = train(&spec, &data, &sgd_cfg, None).unwrap();
        let (_, gd_traj) = train(&spec, &data, &gd_cfg, None).unwrap();
        for t in 1..=20 {
            let a = sgd_traj.theta_at(t).unwrap();
            let b = gd_traj.theta_at(t).unwrap();
            assert_eq!(a.as_slice(), b.as_slice(), "step {t}");
        }
    }

    #[test]
    fn sgd_same_seed_identical() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 64,
            d: 4,
            coef_std: 1.0,
            noise_std: 0.5,
            seed: 9,
        })
        .unwrap();
        let spec = ModelSpec::mlp(vec![4, 8, 1], Activation::Tanh, 0.2, LossKind::HalfMseNormalized)
            .unwrap();
        let cfg = TrainConfig::sgd(0.01, 0.9, 16, 15, 15, 0.0, 77);
        let (a, _) = train(&spec, &data, &cfg, None).unwrap();
        let (b, _) = train(&spec, &data, &cfg, None).unwrap();
        assert_eq!(a.theta.as_slice(), b.theta.as_slice());
    }

    #[test]
    fn sgd_loss_trend_downward() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 128,
            d: 5,
            coef_std: 1.0,
            noise_std: 0.2,
            seed: 10,
        })
        .unwrap();
        let spec = ModelSpec::linear(5, 1, LossKind::HalfMseNormalized);
        let theta0 = ParamVector::zeros(5);
        let start = models::loss_value(&spec, &theta0, &data, None).unwrap();
        let cfg = TrainConfig::sgd(0.02, 0.0, 32, 30, 30, 0.0, 11);
        let (end, _) = train(&spec, &data, &cfg, None).unwrap();
        assert!(end.final_loss < start, "loss {} -> {}", start, end.final_loss);
    }

    #[test]
    fn gd_monotone_descent_below_curvature_limit() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 300,
            d: 8,
            coef_std: 3.0,
            noise_std: 1.0,
            seed: 12,
        })
        .unwrap();
        let spec = ModelSpec::linear(8, 1, LossKind::HalfMseNormalized);
        let sigma = data.x.gram_scaled(data.n() as f64);
        let eig = sym_eig(&sigma).unwrap();
        let l_max = eig.eigenvalues.last().unwrap();
        let eta = 0.9 / l_max;
        let mut theta = ParamVector::zeros(8);
        let mut prev = models::loss_value(&spec, &theta, &data, None).unwrap();
        for _ in 0..200 {
            theta = gd_step(&spec, &theta, &data, eta, None).unwrap();
            let cur = models::loss_value(&spec, &theta, &data, None).unwrap();
            assert!(cur <= prev + 1e-15, "loss increased {prev} -> {cur}");
            prev = cur;
        }
    }

    #[test]
    fn trajectory_ends_at_endpoint_for_strictly_decreasing_loss() {
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 100,
            d: 4,
            coef_std: 2.0,
            noise_std: 1.0,
            seed: 14,
        })
        .unwrap();
        let spec = ModelSpec::linear(4, 1, LossKind::HalfMseNormalized);
        let cfg = TrainConfig::gd(0.05, 60, 60, 0.0, 0).with_checkpoints(vec![10, 20]);
        let (end, traj) = train(&spec, &data, &cfg, None).unwrap();
        let (last_step, last_theta) = traj.points.last().unwrap();
        assert_eq!(*last_step, end.stop_step);
        assert_eq!(last_theta.as_slice(), end.theta.as_slice());
        // Steps strictly increasing with theta_0 present.
        assert_eq!(traj.points[0].0, 0);
        for w in traj.points.windows(2) {
            assert!(w[0].0 < w[1].0);
        }
    }

    #[test]
    fn checkpoint_files_emitted() {
        let dir = tempfile::tempdir().unwrap();
        let (data, _) = gen_linear(&LinearGenConfig {
            n: 30,
            d: 3,
            coef_std: 1.0,
            noise_std: 0.5,
            seed: 20,
        })
        .unwrap();
        let spec = ModelSpec::linear(3, 1, LossKind::HalfMseNormalized);
        let mut cfg = TrainConfig::gd_fixed_steps(0.05, 10, 0).with_checkpoints(vec![5]);
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        let (_, traj) = train(&spec, &data, &cfg, None).unwrap();
        let path = dir.path().join("step_000005.ckpt");
        let (spec2, theta2) = crate::models::load_checkpoint(&path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(theta2.as_slice(), traj.theta_at(5).unwrap().as_slice());
    }

    #[test]
    fn config_validation() {
        let (spec, data) = scalar_quadratic_data();
        let bad_eta = TrainConfig::gd(0.0, 10, 5, 0.0, 0);
        assert!(matches!(
            train(&spec, &data, &bad_eta, None),
            Err(TrainingError::Config(_))
        ));
        let bad_patience = TrainConfig::gd(0.1, 10, 11, 0.0, 0);
        assert!(matches!(
            train(&spec, &data, &bad_patience, None),
            Err(TrainingError::Config(_))
        ));
        let bad_batch = TrainConfig::sgd(0.1, 0.9, 0, 10, 5, 0.0, 0);
        assert!(matches!(
            train(&spec, &data, &bad_batch, None),
            Err(TrainingError::Config(_))
        ));
    }
}
