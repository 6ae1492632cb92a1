//! Early-stopping pipelines on noisy least squares: the theory matrix, fixed-
//! iterate full-matrix recovery from stacked endpoints, single-endpoint
//! diagonal fits validated by retraining, convergence of the stacked
//! estimator under per-endpoint early stopping, and the scalar-ridge
//! heuristic tracked over training steps.
//!
//! All panels share the data-generating process `y = X theta + eps` with a
//! fixed design matrix `X` drawn once from the master seed, standard-normal
//! entries, `theta_i ~ N(0, coef_std^2)` and `eps_i ~ N(0, noise_std^2)`.
//! Estimated quadratic matrices are reported in the `theta^T Lambda theta`
//! convention of the theory matrix (twice the fitted family matrix).

use std::collections::BTreeMap;

use crate::estimator::{endpoint_system, fit_linear, retrain_validate, stack, EstimationSystem};
use crate::harness::config::{CommonConfig, ConfigError, ConfigMap};
use crate::harness::csvio::{fmt_f64, CsvTable};
use crate::harness::parallel::parallel_map;
use crate::harness::runners::{quadratic_matrix_in_theory_convention, status_error, status_ok};
use crate::harness::{derive_seed, ExperimentOutput, HarnessError};
use crate::models::{LossKind, ModelSpec, ParamVector};
use crate::numkernel::{sym_eig, Matrix};
use crate::oracles::{ali_lambda, scalarize_lambda, TheoryLambda};
use crate::regfam::{RegFamily, RegularizerSpec};
use crate::rng::RngStream;
use crate::synthdata::Dataset;
use crate::training::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Panel {
    A,
    B,
    C,
    D,
    E,
}

impl Panel {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Panel::A),
            "b" => Ok(Panel::B),
            "c" => Ok(Panel::C),
            "d" => Ok(Panel::D),
            "e" => Ok(Panel::E),
            other => Err(HarnessError::Invalid(format!(
                "unknown panel {other:?}; expected one of a, b, c, d, e"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Panel::A => "a",
            Panel::B => "b",
            Panel::C => "c",
            Panel::D => "d",
            Panel::E => "e",
        }
    }
}

pub const DEFAULT_CHECKPOINTS: [usize; 12] = [1, 2, 5, 10, 20, 50, 100, 150, 200, 300, 500, 1000];

#[derive(Clone, Debug)]
pub struct EarlyStoppingConfig {
    pub common: CommonConfig,
    pub n: usize,
    pub d: usize,
    pub coef_std: f64,
    pub noise_std: f64,
    pub eta: f64,
    /// Shared fixed iterate for panels a and b and refit targets.
    pub t_fixed: usize,
    /// Endpoints per stacked fit in panel b.
    pub m_endpoints: usize,
    /// Endpoint pools in panel d.
    pub pools: usize,
    /// Largest stack size in panel d.
    pub m_max: usize,
    /// Epoch budget for early-stopped runs (panels c and d).
    pub max_epochs: usize,
    pub patience: usize,
    /// Checkpoint grid for panel e.
    pub checkpoints: Vec<usize>,
    /// Whiten the design so `(1/n) X^T X = I` (panel e heuristic-vs-theory).
    pub isotropic: bool,
}

impl EarlyStoppingConfig {
    pub fn from_map(map: &mut ConfigMap) -> Result<Self, ConfigError> {
        Ok(EarlyStoppingConfig {
            common: CommonConfig::from_map(map)?,
            n: map.require_usize("n")?,
            d: map.require_usize("d")?,
            coef_std: map.require_f64("coef_std")?,
            noise_std: map.require_f64("noise_std")?,
            eta: map.require_f64("eta")?,
            t_fixed: map.opt_usize("t_fixed", 500)?,
            m_endpoints: map.opt_usize("m_endpoints", 10)?,
            pools: map.opt_usize("pools", 5)?,
            m_max: map.opt_usize("m_max", 40)?,
            max_epochs: map.opt_usize("max_epochs", 2000)?,
            patience: map.opt_usize("patience", 5)?,
            checkpoints: map.opt_usize_list("checkpoints", &DEFAULT_CHECKPOINTS)?,
            isotropic: map.opt_bool("isotropic", false)?,
        })
    }
}

/// The shared design matrix, optionally whitened to an exactly isotropic
/// second moment.
fn design_matrix(cfg: &EarlyStoppingConfig) -> Result<Matrix, HarnessError> {
    let seed = derive_seed(cfg.common.master_seed, "early-stopping/design");
    let mut rng = RngStream::new(seed, "design");
    let mut x = Matrix::from_vec(cfg.n, cfg.d, rng.normal_vec(cfg.n * cfg.d));
    if cfg.isotropic {
        // X <- X V S^{-1/2} V^T makes (1/n) X^T X the identity.
        let eig = sym_eig(&x.gram_scaled(cfg.n as f64))?;
        let mut white = Matrix::zeros(cfg.d, cfg.d);
        for k in 0..cfg.d {
            let s = eig.eigenvalues[k].max(1e-12);
            let inv_sqrt = 1.0 / s.sqrt();
            for i in 0..cfg.d {
                for j in 0..cfg.d {
                    let cur = white.get(i, j);
                    white.set(
                        i,
                        j,
                        cur + eig.eigenvectors.get(i, k) * inv_sqrt * eig.eigenvectors.get(j, k),
                    );
                }
            }
        }
        x = x.matmul(&white);
    }
    Ok(x)
}

/// Fresh targets on the shared design: `y = X theta* + eps`.
fn dataset_on(x: &Matrix, coef_std: f64, noise_std: f64, seed: u64, label: &str) -> Dataset {
    let mut rng = RngStream::new(seed, "endpoint-targets");
    let d = x.cols();
    let n = x.rows();
    let theta: Vec<f64> = (0..d).map(|_| rng.normal_scaled(coef_std)).collect();
    let xtheta = x.matvec(&theta);
    let mut y = Matrix::zeros(n, 1);
    for i in 0..n {
        y.set(i, 0, xtheta[i] + rng.normal_scaled(noise_std));
    }
    Dataset {
        x: x.clone(),
        y,
        id: label.to_string(),
    }
}

fn model(cfg: &EarlyStoppingConfig) -> ModelSpec {
    ModelSpec::linear(cfg.d, 1, LossKind::HalfMseNormalized)
}

/// Trains full-batch GD from zero for exactly `t` steps and returns the
/// iterate at `t`.
fn iterate_at(
    spec: &ModelSpec,
    data: &Dataset,
    eta: f64,
    t: usize,
) -> Result<ParamVector, HarnessError> {
    let cfg = TrainConfig::gd_fixed_steps(eta, t, 0).with_checkpoints(vec![t]);
    let (_, traj) = train(spec, data, &cfg, None)?;
    Ok(traj
        .theta_at(t)
        .expect("fixed-step run records its final checkpoint")
        .clone())
}

fn sym_system(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &ParamVector,
) -> Result<EstimationSystem, HarnessError> {
    let reg = RegularizerSpec::new(RegFamily::SymQuadratic);
    Ok(endpoint_system(&reg, spec, data, theta)?)
}

fn rel_frobenius(estimate: &Matrix, theory: &Matrix) -> f64 {
    estimate.sub(theory).frobenius_norm() / theory.frobenius_norm().max(1e-300)
}

fn panel_a(cfg: &EarlyStoppingConfig) -> Result<ExperimentOutput, HarnessError> {
    let x = design_matrix(cfg)?;
    let theory = ali_lambda(&x, cfg.eta, cfg.t_fixed)?;
    let mut table = CsvTable::new(&["i", "j", "lambda_theory"]);
    for i in 0..cfg.d {
        for j in 0..cfg.d {
            table.push(vec![
                i.to_string(),
                j.to_string(),
                fmt_f64(theory.matrix.get(i, j)),
            ]);
        }
    }
    let summary = vec![format!(
        "theory matrix at t={}: trace/p {} frobenius {}",
        cfg.t_fixed,
        fmt_f64(scalarize_lambda(&theory)),
        fmt_f64(theory.matrix.frobenius_norm())
    )];
    Ok(ExperimentOutput {
        experiment: "early-stopping-a".into(),
        total_runs: 1,
        failures: 0,
        tables: vec![("early_stopping_a".into(), table)],
        summary,
    })
}

fn panel_b(cfg: &EarlyStoppingConfig) -> Result<ExperimentOutput, HarnessError> {
    let x = design_matrix(cfg)?;
    let theory = ali_lambda(&x, cfg.eta, cfg.t_fixed)?;
    let spec = model(cfg);
    let seeds: Vec<usize> = (0..cfg.common.seeds).collect();
    let results = parallel_map(&seeds, cfg.common.parallelism, |&seed_idx| {
        (|| -> Result<(f64, f64, f64, usize), HarnessError> {
            let mut systems = Vec::new();
            for e in 0..cfg.m_endpoints {
                let seed = derive_seed(
                    cfg.common.master_seed,
                    &format!("early-stopping-b/pool{seed_idx}/endpoint{e}"),
                );
                let data = dataset_on(
                    &x,
                    cfg.coef_std,
                    cfg.noise_std,
                    seed,
                    &format!("es-b-pool{seed_idx}-e{e}"),
                );
                let theta = iterate_at(&spec, &data, cfg.eta, cfg.t_fixed)?;
                systems.push(sym_system(&spec, &data, &theta)?);
            }
            let stacked = stack(systems)?;
            let fit = fit_linear(&stacked, false)?;
            let estimate = quadratic_matrix_in_theory_convention(&fit)
                .expect("sym-quadratic fit materializes");
            Ok((
                rel_frobenius(&estimate, &theory.matrix),
                fit.residual_mse,
                fit.diagnostics.cond,
                fit.diagnostics.rank,
            ))
        })()
    });
    let mut table = CsvTable::new(&[
        "seed",
        "m",
        "rel_frobenius_err",
        "residual_mse",
        "cond",
        "rank",
        "status",
    ]);
    let mut failures = 0usize;
    let mut summary = Vec::new();
    for (seed_idx, outcome) in seeds.iter().zip(results) {
        match outcome {
            Ok((rel, mse, cond, rank)) => {
                summary.push(format!(
                    "pool {seed_idx}: rel frobenius err {} ({} endpoints)",
                    fmt_f64(rel),
                    cfg.m_endpoints
                ));
                table.push(vec![
                    seed_idx.to_string(),
                    cfg.m_endpoints.to_string(),
                    fmt_f64(rel),
                    fmt_f64(mse),
                    fmt_f64(cond),
                    rank.to_string(),
                    status_ok(),
                ]);
            }
            Err(e) => {
                failures += 1;
                table.push(vec![
                    seed_idx.to_string(),
                    cfg.m_endpoints.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    status_error(&e.to_string()),
                ]);
            }
        }
    }
    Ok(ExperimentOutput {
        experiment: "early-stopping-b".into(),
        total_runs: seeds.len(),
        failures,
        tables: vec![("early_stopping_b".into(), table)],
        summary,
    })
}

fn panel_c(cfg: &EarlyStoppingConfig) -> Result<ExperimentOutput, HarnessError> {
    let x = design_matrix(cfg)?;
    let spec = model(cfg);
    let s_max = sym_eig(&x.gram_scaled(cfg.n as f64))?
        .eigenvalues
        .last()
        .copied()
        .unwrap_or(1.0);
    let seeds: Vec<usize> = (0..cfg.common.seeds).collect();
    let results = parallel_map(&seeds, cfg.common.parallelism, |&seed_idx| {
        (|| -> Result<(usize, f64, f64, f64, f64), HarnessError> {
            let seed = derive_seed(
                cfg.common.master_seed,
                &format!("early-stopping-c/seed{seed_idx}"),
            );
            let data = dataset_on(
                &x,
                cfg.coef_std,
                cfg.noise_std,
                seed,
                &format!("es-c-{seed_idx}"),
            );
            // Early-stopped training run (the feature under study).
            let train_cfg = TrainConfig::gd(cfg.eta, cfg.max_epochs, cfg.patience, 0.0, 0);
            let (endpoint, _) = train(&spec, &data, &train_cfg, None)?;
            // Under-parametrized diagonal fit from this single endpoint.
            let reg = RegularizerSpec::new(RegFamily::DiagQuadratic);
            let system = endpoint_system(&reg, &spec, &data, &endpoint.theta)?;
            let fit = fit_linear(&system, false)?;
            // Retrain with the explicit penalty and early stopping removed.
            let max_pen = fit
                .params
                .as_slice()
                .iter()
                .fold(0.0_f64, |m, &v| m.max(v.max(0.0)));
            let retrain_eta = 0.9 / (s_max + 2.0 * max_pen);
            let retrain_cfg = TrainConfig::gd(retrain_eta, 200_000, 100, 0.0, 0);
            let report = retrain_validate(
                &spec,
                &data,
                &reg,
                &fit.params,
                &retrain_cfg,
                &endpoint.theta,
            )?;
            Ok((
                endpoint.stop_step,
                report.rel_distance,
                report.loss_gap,
                fit.residual_mse,
                fit.diagnostics.cond,
            ))
        })()
    });
    let mut table = CsvTable::new(&[
        "seed",
        "stop_step",
        "rel_distance",
        "loss_gap",
        "residual_mse",
        "cond",
        "status",
    ]);
    let mut failures = 0usize;
    let mut summary = Vec::new();
    for (seed_idx, outcome) in seeds.iter().zip(results) {
        match outcome {
            Ok((stop, rel, gap, mse, cond)) => {
                summary.push(format!(
                    "seed {seed_idx}: stop t={stop}, retrain rel distance {}",
                    fmt_f64(rel)
                ));
                table.push(vec![
                    seed_idx.to_string(),
                    stop.to_string(),
                    fmt_f64(rel),
                    fmt_f64(gap),
                    fmt_f64(mse),
                    fmt_f64(cond),
                    status_ok(),
                ]);
            }
            Err(e) => {
                failures += 1;
                table.push(vec![
                    seed_idx.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    status_error(&e.to_string()),
                ]);
            }
        }
    }
    Ok(ExperimentOutput {
        experiment: "early-stopping-c".into(),
        total_runs: seeds.len(),
        failures,
        tables: vec![("early_stopping_c".into(), table)],
        summary,
    })
}

fn entrywise_median(mats: &[Matrix]) -> Matrix {
    let rows = mats[0].rows();
    let cols = mats[0].cols();
    let mut out = Matrix::zeros(rows, cols);
    let mut buf = Vec::with_capacity(mats.len());
    for i in 0..rows {
        for j in 0..cols {
            buf.clear();
            buf.extend(mats.iter().map(|m| m.get(i, j)));
            buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = buf.len() / 2;
            let v = if buf.len() % 2 == 1 {
                buf[mid]
            } else {
                0.5 * (buf[mid - 1] + buf[mid])
            };
            out.set(i, j, v);
        }
    }
    out
}

fn panel_d(cfg: &EarlyStoppingConfig) -> Result<ExperimentOutput, HarnessError> {
    let x = design_matrix(cfg)?;
    let spec = model(cfg);
    let pools: Vec<usize> = (0..cfg.pools).collect();
    type PoolRows = Vec<(usize, f64, f64, f64, usize)>;
    let results = parallel_map(&pools, cfg.common.parallelism, |&pool| {
        (|| -> Result<PoolRows, HarnessError> {
            let mut systems = Vec::new();
            let mut theories = Vec::new();
            let mut theory_cache: BTreeMap<usize, TheoryLambda> = BTreeMap::new();
            for e in 0..cfg.m_max {
                let seed = derive_seed(
                    cfg.common.master_seed,
                    &format!("early-stopping-d/pool{pool}/endpoint{e}"),
                );
                let data = dataset_on(
                    &x,
                    cfg.coef_std,
                    cfg.noise_std,
                    seed,
                    &format!("es-d-pool{pool}-e{e}"),
                );
                let train_cfg = TrainConfig::gd(cfg.eta, cfg.max_epochs, cfg.patience, 0.0, 0);
                let (endpoint, _) = train(&spec, &data, &train_cfg, None)?;
                let t_k = endpoint.stop_step.max(1);
                if !theory_cache.contains_key(&t_k) {
                    theory_cache.insert(t_k, ali_lambda(&x, cfg.eta, t_k)?);
                }
                theories.push(theory_cache[&t_k].matrix.clone());
                systems.push(sym_system(&spec, &data, &endpoint.theta)?);
            }
            let median = entrywise_median(&theories);
            let mut rows = Vec::new();
            for m in 1..=cfg.m_max {
                let stacked = stack(systems[..m].to_vec())?;
                let fit = fit_linear(&stacked, false)?;
                let estimate = quadratic_matrix_in_theory_convention(&fit)
                    .expect("sym-quadratic fit materializes");
                let dist = estimate.sub(&median).frobenius_norm();
                let rel = dist / median.frobenius_norm().max(1e-300);
                rows.push((m, dist, rel, fit.residual_mse, fit.diagnostics.rank));
            }
            Ok(rows)
        })()
    });
    let mut table = CsvTable::new(&[
        "pool",
        "m",
        "frobenius_dist",
        "rel_frobenius_dist",
        "residual_mse",
        "rank",
        "status",
    ]);
    let mut per_m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut failures = 0usize;
    for (pool, outcome) in pools.iter().zip(results) {
        match outcome {
            Ok(rows) => {
                for (m, dist, rel, mse, rank) in rows {
                    per_m.entry(m).or_default().push(dist);
                    table.push(vec![
                        pool.to_string(),
                        m.to_string(),
                        fmt_f64(dist),
                        fmt_f64(rel),
                        fmt_f64(mse),
                        rank.to_string(),
                        status_ok(),
                    ]);
                }
            }
            Err(e) => {
                failures += 1;
                table.push(vec![
                    pool.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    status_error(&e.to_string()),
                ]);
            }
        }
    }
    let mut summary_table = CsvTable::new(&["m", "mean_dist", "ci_lo", "ci_hi"]);
    let mut summary = Vec::new();
    for (m, dists) in &per_m {
        let n = dists.len() as f64;
        let mean = dists.iter().sum::<f64>() / n;
        let se = if dists.len() > 1 {
            let var =
                dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        summary_table.push(vec![
            m.to_string(),
            fmt_f64(mean),
            fmt_f64(mean - 1.96 * se),
            fmt_f64(mean + 1.96 * se),
        ]);
        if *m == 1 || *m == cfg.m_max {
            summary.push(format!("m={m}: mean distance to median theory {}", fmt_f64(mean)));
        }
    }
    Ok(ExperimentOutput {
        experiment: "early-stopping-d".into(),
        total_runs: pools.len(),
        failures,
        tables: vec![
            ("early_stopping_d".into(), table),
            ("early_stopping_d_summary".into(), summary_table),
        ],
        summary,
    })
}

fn panel_e(cfg: &EarlyStoppingConfig) -> Result<ExperimentOutput, HarnessError> {
    let x = design_matrix(cfg)?;
    let spec = model(cfg);
    let seed = derive_seed(cfg.common.master_seed, "early-stopping-e/data");
    let data = dataset_on(&x, cfg.coef_std, cfg.noise_std, seed, "es-e");
    let mut checkpoints = cfg.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let t_max = checkpoints.last().copied().unwrap_or(1);
    // One deterministic GD trajectory with no early stopping.
    let train_cfg =
        TrainConfig::gd_fixed_steps(cfg.eta, t_max, 0).with_checkpoints(checkpoints.clone());
    let (_, traj) = train(&spec, &data, &train_cfg, None)?;
    let reg = RegularizerSpec::new(RegFamily::ScalarRidge);
    let results = parallel_map(&checkpoints, cfg.common.parallelism, |&t| {
        (|| -> Result<(f64, f64, f64, f64), HarnessError> {
            let theta = traj
                .theta_at(t)
                .ok_or_else(|| HarnessError::Invalid(format!("no checkpoint at t={t}")))?;
            let system = endpoint_system(&reg, &spec, &data, theta)?;
            let fit = fit_linear(&system, false)?;
            let theory = scalarize_lambda(&ali_lambda(&x, cfg.eta, t)?);
            Ok((
                fit.params.as_slice()[0],
                theory,
                fit.residual_mse,
                fit.diagnostics.cond,
            ))
        })()
    });
    let mut table = CsvTable::new(&[
        "t",
        "lambda_hat",
        "lambda_theory",
        "residual_mse",
        "cond",
        "status",
    ]);
    let mut failures = 0usize;
    let mut summary = Vec::new();
    for (&t, outcome) in checkpoints.iter().zip(results) {
        match outcome {
            Ok((hat, theory, mse, cond)) => {
                summary.push(format!(
                    "t={t}: lambda_hat {} theory {}",
                    fmt_f64(hat),
                    fmt_f64(theory)
                ));
                table.push(vec![
                    t.to_string(),
                    fmt_f64(hat),
                    fmt_f64(theory),
                    fmt_f64(mse),
                    fmt_f64(cond),
                    status_ok(),
                ]);
            }
            Err(e) => {
                failures += 1;
                table.push(vec![
                    t.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    status_error(&e.to_string()),
                ]);
            }
        }
    }
    Ok(ExperimentOutput {
        experiment: "early-stopping-e".into(),
        total_runs: checkpoints.len(),
        failures,
        tables: vec![("early_stopping_e".into(), table)],
        summary,
    })
}

pub fn run_early_stopping(
    cfg: &EarlyStoppingConfig,
    panel: Panel,
) -> Result<ExperimentOutput, HarnessError> {
    match panel {
        Panel::A => panel_a(cfg),
        Panel::B => panel_b(cfg),
        Panel::C => panel_c(cfg),
        Panel::D => panel_d(cfg),
        Panel::E => panel_e(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> EarlyStoppingConfig {
        EarlyStoppingConfig {
            common: CommonConfig {
                master_seed: 11,
                seeds: 2,
                output_dir: "unused".into(),
                parallelism: 2,
                fail_tolerance: 0.0,
            },
            n: 300,
            d: 6,
            coef_std: 3.0,
            noise_std: 1.0,
            eta: 0.01,
            t_fixed: 100,
            m_endpoints: 8,
            pools: 2,
            m_max: 6,
            max_epochs: 400,
            patience: 5,
            checkpoints: vec![1, 5, 20, 100],
            isotropic: false,
        }
    }

    #[test]
    fn panel_b_recovers_matrix_exactly() {
        let out = run_early_stopping(&tiny_cfg(), Panel::B).unwrap();
        assert_eq!(out.failures, 0);
        for row in &out.tables[0].1.rows {
            let rel: f64 = row[2].parse().unwrap();
            assert!(rel < 1e-6, "rel frobenius {rel}");
        }
    }

    #[test]
    fn panel_e_decays() {
        let out = run_early_stopping(&tiny_cfg(), Panel::E).unwrap();
        assert_eq!(out.failures, 0);
        let rows = &out.tables[0].1.rows;
        let hats: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
        for w in hats.windows(2) {
            assert!(w[1] < w[0], "lambda_hat not decaying: {hats:?}");
        }
    }

    #[test]
    fn panel_a_emits_full_matrix() {
        let cfg = tiny_cfg();
        let out = run_early_stopping(&cfg, Panel::A).unwrap();
        assert_eq!(out.tables[0].1.rows.len(), cfg.d * cfg.d);
    }
}
