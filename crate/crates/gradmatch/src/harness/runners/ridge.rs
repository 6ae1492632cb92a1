//! Explicit ridge round trip: build the exact ridge optimum, read the
//! residual loss gradient off it, and recover the penalty strength by
//! gradient matching.

use crate::estimator::{endpoint_system, fit_linear};
use crate::harness::config::{CommonConfig, ConfigError, ConfigMap};
use crate::harness::csvio::{fmt_f64, CsvTable};
use crate::harness::parallel::parallel_map;
use crate::harness::runners::{status_error, status_ok};
use crate::harness::{derive_seed, ExperimentOutput, HarnessError};
use crate::models::{LossKind, ModelSpec, ParamVector};
use crate::oracles::ridge_closed_form;
use crate::regfam::{RegFamily, RegularizerSpec};
use crate::synthdata::{gen_linear, LinearGenConfig};

#[derive(Clone, Debug)]
pub struct RidgeConfig {
    pub common: CommonConfig,
    pub n: usize,
    pub d: usize,
    pub coef_std: f64,
    pub noise_std: f64,
    pub lambdas: Vec<f64>,
}

impl RidgeConfig {
    pub fn from_map(map: &mut ConfigMap) -> Result<Self, ConfigError> {
        Ok(RidgeConfig {
            common: CommonConfig::from_map(map)?,
            n: map.require_usize("n")?,
            d: map.require_usize("d")?,
            coef_std: map.require_f64("coef_std")?,
            noise_std: map.require_f64("noise_std")?,
            lambdas: map.require_f64_list("lambdas")?,
        })
    }
}

struct Cell {
    lambda: f64,
    cell_idx: usize,
    seed_idx: usize,
}

fn run_cell(cfg: &RidgeConfig, cell: &Cell) -> Result<(f64, f64, f64, f64, usize), HarnessError> {
    let data_seed = derive_seed(
        cfg.common.master_seed,
        &format!("ridge/cell{}/seed{}/data", cell.cell_idx, cell.seed_idx),
    );
    let (data, _) = gen_linear(&LinearGenConfig {
        n: cfg.n,
        d: cfg.d,
        coef_std: cfg.coef_std,
        noise_std: cfg.noise_std,
        seed: data_seed,
    })?;
    let y = data.y.column(0);
    let theta = ParamVector(ridge_closed_form(&data.x, &y, cell.lambda)?);
    let model = ModelSpec::linear(cfg.d, 1, LossKind::SquaredErrorHalf);
    let reg = RegularizerSpec::new(RegFamily::ScalarRidge);
    let system = endpoint_system(&reg, &model, &data, &theta)?;
    let fit = fit_linear(&system, false)?;
    let lambda_hat = fit.params.as_slice()[0];
    let rel_err = (lambda_hat - cell.lambda).abs() / cell.lambda.abs().max(1e-300);
    Ok((
        lambda_hat,
        rel_err,
        fit.residual_mse,
        fit.diagnostics.cond,
        fit.diagnostics.rank,
    ))
}

pub fn run_ridge(cfg: &RidgeConfig) -> Result<ExperimentOutput, HarnessError> {
    let mut cells = Vec::new();
    for (cell_idx, &lambda) in cfg.lambdas.iter().enumerate() {
        for seed_idx in 0..cfg.common.seeds {
            cells.push(Cell {
                lambda,
                cell_idx,
                seed_idx,
            });
        }
    }
    let results = parallel_map(&cells, cfg.common.parallelism, |cell| {
        (cell.lambda, cell.seed_idx, run_cell(cfg, cell))
    });
    let mut table = CsvTable::new(&[
        "lambda_true",
        "seed",
        "lambda_hat",
        "rel_err",
        "residual_mse",
        "cond",
        "rank",
        "status",
    ]);
    let mut failures = 0usize;
    let mut per_cell: Vec<(f64, Vec<f64>)> = cfg.lambdas.iter().map(|&l| (l, vec![])).collect();
    for (lambda, seed_idx, outcome) in results {
        match outcome {
            Ok((hat, rel, mse, cond, rank)) => {
                if let Some(slot) = per_cell.iter_mut().find(|(l, _)| *l == lambda) {
                    slot.1.push(rel);
                }
                table.push(vec![
                    fmt_f64(lambda),
                    seed_idx.to_string(),
                    fmt_f64(hat),
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
                    fmt_f64(lambda),
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
    let summary = per_cell
        .iter()
        .map(|(lambda, rels)| {
            let worst = rels.iter().cloned().fold(0.0_f64, f64::max);
            format!(
                "lambda={}: {} seeds, worst rel_err {}",
                fmt_f64(*lambda),
                rels.len(),
                fmt_f64(worst)
            )
        })
        .collect();
    Ok(ExperimentOutput {
        experiment: "ridge".into(),
        total_runs: cells.len(),
        failures,
        tables: vec![("ridge".into(), table)],
        summary,
    })
}
