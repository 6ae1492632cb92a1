//! Gradient self-checks: analytic gradients, regularizer gradients, and
//! Hessian-vector products against central finite differences over a fixed
//! grid of model/loss/family combinations.

use crate::harness::config::{CommonConfig, ConfigMap, ConfigError};
use crate::harness::csvio::{fmt_f64, CsvTable};
use crate::harness::parallel::parallel_map;
use crate::harness::{ExperimentOutput, HarnessError};
use crate::models::{
    self, min_preactivation_margin, sample_dropout_mask, Activation, DropoutMask, LossKind,
    ModelKind, ModelSpec, ParamVector,
};
use crate::numkernel::Matrix;
use crate::regfam::{self, RegFamily, RegParams, RegularizerSpec};
use crate::rng::RngStream;
use crate::synthdata::Dataset;

pub const GRAD_THRESHOLD: f64 = 1e-5;
pub const HVP_THRESHOLD: f64 = 1e-4;
pub const REG_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub common: CommonConfig,
}

impl GradcheckConfig {
    pub fn from_map(map: &mut ConfigMap) -> Result<Self, ConfigError> {
        Ok(GradcheckConfig {
            common: CommonConfig::from_map(map)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub case: String,
    pub check: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub status: String,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.status == "pass" || self.status.starts_with("skipped")
    }
}

/// Compares an analytic vector against a reference (finite-difference) vector
/// at a relative threshold. Exposed for fault-injection tests.
pub fn check_vector(
    case: &str,
    check: &str,
    analytic: &[f64],
    reference: &[f64],
    threshold: f64,
) -> CheckRow {
    let diff: f64 = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = diff / scale.max(1e-300);
    CheckRow {
        case: case.to_string(),
        check: check.to_string(),
        max_rel_err: rel,
        threshold,
        status: if rel < threshold { "pass" } else { "fail" }.to_string(),
    }
}

fn fixture_data(output_dim: usize) -> Dataset {
    let x = Matrix::from_rows(&[
        vec![0.3, -1.2, 0.8, 0.1],
        vec![1.1, 0.4, -0.6, -0.9],
        vec![-0.5, 0.9, 0.2, 0.7],
        vec![0.0, -0.3, 1.4, -0.2],
        vec![0.6, 0.5, -1.0, 0.4],
    ]);
    let y = if output_dim == 1 {
        Matrix::from_rows(&[vec![0.7], vec![-1.0], vec![0.4], vec![1.2], vec![-0.3]])
    } else {
        let mut y = Matrix::zeros(5, output_dim);
        for (i, c) in [0usize, 1, 0, 1, 0].iter().enumerate() {
            y.set(i, c % output_dim, 1.0);
        }
        y
    };
    Dataset {
        x,
        y,
        id: "gradcheck-fixture".into(),
    }
}

/// Draws a probe point, resampling until relu pre-activations sit clear of
/// the finite-difference window.
fn probe_theta(spec: &ModelSpec, x: &Matrix, seed: u64) -> ParamVector {
    for attempt in 0..200u64 {
        let theta = match spec.kind {
            ModelKind::Linear => {
                let mut rng = RngStream::new(seed + 1000 * attempt, "gradcheck-theta");
                ParamVector(rng.normal_vec(spec.param_count()))
            }
            ModelKind::Mlp => models::init_params(spec, seed + 1000 * attempt),
        };
        if spec.activation != Activation::Relu
            || min_preactivation_margin(spec, &theta, x).unwrap_or(0.0) > 1e-3
        {
            return theta;
        }
    }
    unreachable!("relu probe resampling exhausted 200 attempts")
}

fn fd_loss_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    mask: Option<&DropoutMask>,
) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        let mut plus = theta.clone();
        plus.0[i] += h;
        let mut minus = theta.clone();
        minus.0[i] -= h;
        let lp = models::loss_value(spec, &plus, data, mask).expect("fd loss");
        let lm = models::loss_value(spec, &minus, data, mask).expect("fd loss");
        g[i] = (lp - lm) / (2.0 * h);
    }
    g
}

fn loss_grad_cases(master_seed: u64) -> Vec<CheckRow> {
    let specs: Vec<(ModelSpec, Option<u64>)> = vec![
        (ModelSpec::linear(4, 1, LossKind::HalfMseNormalized), None),
        (ModelSpec::linear(4, 1, LossKind::SquaredErrorHalf), None),
        (ModelSpec::linear(4, 2, LossKind::CrossEntropy), None),
        (
            ModelSpec::mlp(vec![4, 8, 1], Activation::Tanh, 0.0, LossKind::HalfMseNormalized)
                .unwrap(),
            None,
        ),
        (
            ModelSpec::mlp(vec![4, 8, 1], Activation::Relu, 0.0, LossKind::SquaredErrorHalf)
                .unwrap(),
            None,
        ),
        (
            ModelSpec::mlp(vec![4, 6, 5, 2], Activation::Tanh, 0.0, LossKind::CrossEntropy)
                .unwrap(),
            None,
        ),
        (
            ModelSpec::mlp(vec![4, 6, 5, 2], Activation::Relu, 0.0, LossKind::CrossEntropy)
                .unwrap(),
            None,
        ),
        (
            ModelSpec::mlp(vec![4, 8, 2], Activation::Tanh, 0.3, LossKind::CrossEntropy).unwrap(),
            Some(11),
        ),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, (spec, mask_seed))| {
            let data = fixture_data(spec.output_dim());
            let theta = probe_theta(spec, &data.x, master_seed + i as u64);
            let mask = mask_seed.map(|s| sample_dropout_mask(spec, s));
            let name = match mask {
                Some(_) => format!("{spec} (fixed mask)"),
                None => spec.to_string(),
            };
            let g = models::loss_grad(spec, &theta, &data, mask.as_ref()).expect("grad");
            let fd = fd_loss_grad(spec, &theta, &data, mask.as_ref());
            check_vector(&name, "loss_grad-vs-fd", g.as_slice(), &fd, GRAD_THRESHOLD)
        })
        .collect()
}

fn hvp_cases(master_seed: u64) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    let specs: Vec<ModelSpec> = vec![
        ModelSpec::linear(4, 2, LossKind::CrossEntropy),
        ModelSpec::linear(4, 1, LossKind::HalfMseNormalized),
        ModelSpec::mlp(vec![4, 7, 1], Activation::Tanh, 0.0, LossKind::HalfMseNormalized)
            .unwrap(),
        ModelSpec::mlp(vec![4, 5, 4, 2], Activation::Tanh, 0.0, LossKind::CrossEntropy).unwrap(),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let data = fixture_data(spec.output_dim());
        let theta = probe_theta(spec, &data.x, master_seed + 100 + i as u64);
        let mut rng = RngStream::new(master_seed + 200 + i as u64, "hvp-direction");
        let v = ParamVector(rng.normal_vec(spec.param_count()));
        let hv = models::loss_hvp(spec, &theta, &data, &v).expect("hvp");
        let eps = 1e-5;
        let gp = models::loss_grad(spec, &theta.add_scaled(eps, &v), &data, None).unwrap();
        let gm = models::loss_grad(spec, &theta.add_scaled(-eps, &v), &data, None).unwrap();
        let fd: Vec<f64> = gp
            .sub(&gm)
            .as_slice()
            .iter()
            .map(|d| d / (2.0 * eps))
            .collect();
        rows.push(check_vector(
            &spec.to_string(),
            "loss_hvp-vs-fd",
            hv.as_slice(),
            &fd,
            HVP_THRESHOLD,
        ));
    }
    // Relu second derivatives are rejected, reported as a skip with reason.
    let relu =
        ModelSpec::mlp(vec![4, 6, 1], Activation::Relu, 0.0, LossKind::SquaredErrorHalf).unwrap();
    let data = fixture_data(1);
    let theta = probe_theta(&relu, &data.x, master_seed + 300);
    let status = match models::loss_hvp(&relu, &theta, &data, &theta) {
        Err(models::ModelError::Smoothness(_)) => {
            "skipped: relu loss is not twice differentiable".to_string()
        }
        Err(e) => format!("fail: unexpected error {e}"),
        Ok(_) => "fail: relu hvp was not rejected".to_string(),
    };
    rows.push(CheckRow {
        case: relu.to_string(),
        check: "loss_hvp-smoothness-guard".into(),
        max_rel_err: 0.0,
        threshold: HVP_THRESHOLD,
        status,
    });
    rows
}

fn reg_cases(master_seed: u64) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    let p = 6usize;
    let beta = regfam::DEFAULT_BETA;
    let families = [
        RegFamily::ScalarRidge,
        RegFamily::DiagQuadratic,
        RegFamily::SymQuadratic,
        RegFamily::SmoothedL1,
        RegFamily::ElasticNetSmoothed,
    ];
    let mut rng = RngStream::new(master_seed + 400, "regcheck");
    for family in families {
        let spec = RegularizerSpec::new(family);
        let params = RegParams(rng.normal_vec(spec.param_len(p)));
        // Keep coordinates away from the Huber seam by much more than the
        // finite-difference step.
        let theta = ParamVector(
            (0..p)
                .map(|_| {
                    let mut t = rng.normal();
                    while (t.abs() - beta).abs() < 100.0 * beta * 1e-3 {
                        t = rng.normal();
                    }
                    t
                })
                .collect(),
        );
        let g = regfam::reg_grad(&spec, &params, &theta, None).expect("reg grad");
        let mut fd = vec![0.0; p];
        for i in 0..p {
            let h = 1e-6 * theta[i].abs().max(1.0);
            let mut plus = theta.clone();
            plus.0[i] += h;
            let mut minus = theta.clone();
            minus.0[i] -= h;
            let vp = regfam::reg_value(&spec, &params, &plus, None).unwrap();
            let vm = regfam::reg_value(&spec, &params, &minus, None).unwrap();
            fd[i] = (vp - vm) / (2.0 * h);
        }
        rows.push(check_vector(
            family.name(),
            "reg_grad-vs-fd",
            g.as_slice(),
            &fd,
            REG_THRESHOLD,
        ));
    }
    // grad-norm-penalty checked against finite differences of its value on a
    // tanh model context.
    let model =
        ModelSpec::mlp(vec![4, 5, 1], Activation::Tanh, 0.0, LossKind::HalfMseNormalized).unwrap();
    let data = fixture_data(1);
    let theta = models::init_params(&model, master_seed + 500);
    let ctx = regfam::RegContext {
        model: &model,
        data: &data,
    };
    let spec = RegularizerSpec::new(RegFamily::GradNormPenalty);
    let params = RegParams::scalar(0.7);
    let g = regfam::reg_grad(&spec, &params, &theta, Some(&ctx)).expect("grad-norm grad");
    let mut fd = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        let mut plus = theta.clone();
        plus.0[i] += h;
        let mut minus = theta.clone();
        minus.0[i] -= h;
        let vp = regfam::reg_value(&spec, &params, &plus, Some(&ctx)).unwrap();
        let vm = regfam::reg_value(&spec, &params, &minus, Some(&ctx)).unwrap();
        fd[i] = (vp - vm) / (2.0 * h);
    }
    rows.push(check_vector(
        "grad-norm-penalty",
        "reg_grad-vs-fd",
        g.as_slice(),
        &fd,
        // The value route stacks two extra differentiation levels; allow the
        // hvp tolerance here.
        HVP_THRESHOLD,
    ));
    rows
}

/// Runs every check in the grid; any failing row makes the experiment report
/// failures (and the CLI exit nonzero).
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<ExperimentOutput, HarnessError> {
    let seed = cfg.common.master_seed;
    let groups: Vec<usize> = vec![0, 1, 2];
    let results = parallel_map(&groups, cfg.common.parallelism, |&g| match g {
        0 => loss_grad_cases(seed),
        1 => hvp_cases(seed),
        _ => reg_cases(seed),
    });
    let rows: Vec<CheckRow> = results.into_iter().flatten().collect();
    let mut table = CsvTable::new(&["case", "check", "max_rel_err", "threshold", "status"]);
    let mut failures = 0usize;
    let mut summary = Vec::new();
    for row in &rows {
        if !row.passed() {
            failures += 1;
        }
        summary.push(format!(
            "{}: {} rel_err={} [{}]",
            row.check,
            row.case,
            fmt_f64(row.max_rel_err),
            row.status
        ));
        table.push(vec![
            row.case.clone(),
            row.check.clone(),
            fmt_f64(row.max_rel_err),
            fmt_f64(row.threshold),
            row.status.clone(),
        ]);
    }
    Ok(ExperimentOutput {
        experiment: "gradcheck".into(),
        total_runs: rows.len(),
        failures,
        tables: vec![("gradcheck".into(), table)],
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_common() -> CommonConfig {
        CommonConfig {
            master_seed: 7,
            seeds: 1,
            output_dir: std::path::PathBuf::from("unused"),
            parallelism: 2,
            fail_tolerance: 0.0,
        }
    }

    #[test]
    fn default_grid_all_pass() {
        let out = run_gradcheck(&GradcheckConfig { common: tiny_common() }).unwrap();
        assert_eq!(out.failures, 0, "failing rows: {:?}", out.summary);
        // Relu hvp shows up as a skip with a reason.
        let table = &out.tables[0].1;
        assert!(table
            .rows
            .iter()
            .any(|r| r[4].starts_with("skipped: relu")));
    }

    #[test]
    fn injected_sign_flip_reported_as_failure() {
        let analytic = vec![1.0, -2.0, 0.5];
        let reference = vec![1.0, 2.0, 0.5]; // sign flip in the middle
        let row = check_vector("fixture", "fault-injection", &analytic, &reference, 1e-5);
        assert_eq!(row.status, "fail");
        assert!(row.max_rel_err > 1.0);
    }
}
