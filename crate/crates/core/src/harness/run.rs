use std::fs;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, TableStyle};
use super::derive_seed;
use crate::datagen::{Dataset, Source};
use crate::diffmodels::append_one_hot;
use crate::discrepancy::{marginal_treatment_tv_pooled, mmd_joint};
use crate::error::{FusionError, Result};
use crate::estimators::{
    train_ablation, train_constrained_pd, train_obs_only, train_penalty, train_rct_only, train_t_learner,
    train_weighted, Ablation, ModelBundle, TLearner, TLearnerConfig, TrainConfig, TrainTrace,
};
use crate::metrics::{aggregate, mape, mse_tau, qini, MetricRow, MetricsReport, DEFAULT_MAPE_FLOOR};
use crate::moments::moment_residual;

/// Rows per source entering the held-out MMD.
const EVAL_MMD_ROWS: usize = 1000;

/// One `(method, dial, seed)` grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub dial: f64,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}/dial={}/seed={}", self.method, self.dial, self.seed)
    }

    /// File-system safe directory name.
    pub fn dir_name(&self) -> String {
        format!("{}_dial{}_seed{}", self.method, self.dial, self.seed).replace(':', "-")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub report: MetricsReport,
    pub failures: Vec<CellFailure>,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

enum Fitted {
    Net(Box<ModelBundle>),
    TLearner(TLearner),
}

impl Fitted {
    fn effect(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        match self {
            Fitted::Net(b) => b.effect(x, 1),
            Fitted::TLearner(t) => t.effect(x, 1),
        }
    }

    fn predict(&self, x: ArrayView2<'_, f64>, t: &[usize]) -> Result<Array1<f64>> {
        match self {
            Fitted::Net(b) => b.predict(x, t),
            Fitted::TLearner(tl) => {
                let all = tl.predict_all(x)?;
                Ok(t.iter().enumerate().map(|(i, &a)| all[(i, a)]).collect())
            }
        }
    }

    /// The learned representation; standardized covariates for the T-learner.
    fn represent(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self {
            Fitted::Net(b) => b.represent(x),
            Fitted::TLearner(t) => t.standardizer.apply(x),
        }
    }
}

fn fit(
    method: Method,
    train: &Dataset,
    cfg: &TrainConfig,
    tl_cfg: &TLearnerConfig,
) -> Result<(Fitted, Option<TrainTrace>)> {
    let net = |r: Result<(ModelBundle, TrainTrace)>| r.map(|(b, t)| (Fitted::Net(Box::new(b)), Some(t)));
    match method {
        Method::Pd => net(train_constrained_pd(train, cfg)),
        Method::Penalty => net(train_penalty(train, cfg)),
        Method::DualOnly => net(train_ablation(train, cfg, Ablation::DualOnly)),
        Method::IpmOnly => net(train_ablation(train, cfg, Ablation::IpmOnly)),
        Method::Weighted(alpha) => net(train_weighted(train, &TrainConfig { alpha, ..cfg.clone() })),
        Method::ObsOnly => net(train_obs_only(train, cfg)),
        Method::RctOnly => net(train_rct_only(train, cfg)),
        Method::TLearner => Ok((Fitted::TLearner(train_t_learner(train, tl_cfg)?), None)),
    }
}

fn strided(rows: &[usize], cap: usize) -> Vec<usize> {
    if rows.len() <= cap {
        return rows.to_vec();
    }
    (0..cap).map(|i| rows[i * rows.len() / cap]).collect()
}

fn evaluate(model: &Fitted, cell: &Cell, test: &Dataset) -> Result<MetricRow> {
    let rct = test.require(Source::Rct)?;
    let obs = test.require(Source::Obs)?;

    let tau_hat = model.effect(test.x.view())?.to_vec();
    let (mse, mape_v) = match &test.tau_true {
        Some(tau) => (mse_tau(&tau_hat, tau)?, mape(&tau_hat, tau, DEFAULT_MAPE_FLOOR)?),
        None => (f64::NAN, f64::NAN),
    };

    // Qini ranks the randomized rows that received arm 0 or arm 1.
    let binary: Vec<usize> = rct.iter().copied().filter(|&i| test.t[i] <= 1).collect();
    let q = qini(
        &binary.iter().map(|&i| tau_hat[i]).collect::<Vec<_>>(),
        &test.t_rows(&binary),
        &test.y_rows(&binary),
    )?;

    let (x_r, t_r) = (test.x_rows(&rct), test.t_rows(&rct));
    let m = model.predict(x_r.view(), &t_r)?;
    let strata = test.strata_rows(&rct);
    let g = moment_residual(
        &test.y_rows(&rct),
        &t_r,
        m.as_slice().expect("contiguous"),
        &test.probs,
        strata.as_deref(),
    )?;

    let (rr, ro) = (strided(&rct, EVAL_MMD_ROWS), strided(&obs, EVAL_MMD_ROWS));
    let fr = append_one_hot(
        model.represent(test.x_rows(&rr).view())?.view(),
        &test.t_rows(&rr),
        test.n_arms,
    )?;
    let fo = append_one_hot(
        model.represent(test.x_rows(&ro).view())?.view(),
        &test.t_rows(&ro),
        test.n_arms,
    )?;
    let ipm = mmd_joint(fr.view(), fo.view(), None)?.value;

    Ok(MetricRow {
        method: cell.method.to_string(),
        overlap_dial: cell.dial,
        seed: cell.seed,
        qini: q,
        mse_tau: mse,
        mape: mape_v,
        g_norm: g.norm(),
        ipm,
        marginal_tv: marginal_treatment_tv_pooled(test)?.tv,
    })
}

/// Trains and evaluates one cell, writing its trace under `out/<cell>/`.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<MetricRow> {
    let data = cfg.dataset.materialize(cell.dial, cell.seed)?;
    // Shared by every method and dial on this seed, so comparisons are paired.
    let split_seed = derive_seed(cfg.master_seed, &format!("split/seed={}", cell.seed));
    let (train, test) = data.split_holdout(cfg.test_frac, split_seed)?;
    let train_seed = derive_seed(cfg.master_seed, &cell.id());
    let tcfg = TrainConfig {
        seed: train_seed,
        ..cfg.train_config(cell.method)?
    };
    let tl = TLearnerConfig {
        seed: train_seed,
        ..cfg.t_learner_config()?
    };
    let dir = cfg.out.join(cell.dir_name());
    let fitted = fit(cell.method, &train, &tcfg, &tl);
    let (model, trace) = match fitted {
        Ok(v) => v,
        Err(FusionError::Divergence { step, trace }) => {
            if cfg.write_traces {
                fs::create_dir_all(&dir)?;
                trace.write_csv(BufWriter::new(fs::File::create(dir.join("trace.csv"))?))?;
            }
            return Err(FusionError::Divergence { step, trace });
        }
        Err(e) => return Err(e),
    };
    if let (true, Some(trace)) = (cfg.write_traces, trace) {
        fs::create_dir_all(&dir)?;
        trace.write_csv(BufWriter::new(fs::File::create(dir.join("trace.csv"))?))?;
    }
    evaluate(&model, cell, &test)
}

/// Dial-major, then seed, then method order.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &dial in &cfg.dials {
        for &seed in &cfg.seeds {
            for &method in &cfg.methods {
                cells.push(Cell { method, dial, seed });
            }
        }
    }
    cells
}

/// Runs every cell on a pool of `jobs` threads. Cell failures are collected;
/// only configuration and pool errors abort the run.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let cells = grid_cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| FusionError::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<(Cell, Result<MetricRow>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let start = std::time::Instant::now();
                let r = run_cell(cfg, cell);
                match &r {
                    Ok(_) => log::info!("{} done in {:.1}s", cell.id(), start.elapsed().as_secs_f64()),
                    Err(e) => log::error!("{} failed: {e}", cell.id()),
                }
                (*cell, r)
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (cell, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(CellFailure {
                cell: cell.id(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(RunOutcome {
        config: cfg.clone(),
        report: aggregate(&rows),
        failures,
    })
}

impl RunOutcome {
    /// `metrics.csv`, `summary.csv`, `table.txt` and `run.json` (resolved
    /// config plus failures) under the configured output directory.
    pub fn write(&self) -> Result<()> {
        let out = &self.config.out;
        fs::create_dir_all(out)?;
        self.report
            .write_rows_csv(BufWriter::new(fs::File::create(out.join("metrics.csv"))?))?;
        self.report
            .write_summary_csv(BufWriter::new(fs::File::create(out.join("summary.csv"))?))?;
        fs::write(out.join("table.txt"), self.table())?;
        write_json(&out.join("run.json"), self)
    }

    pub fn table(&self) -> String {
        match self.config.table {
            TableStyle::QiniMse => self.report.format_table(),
            TableStyle::MseGIpm => self.report.format_table_with(&crate::metrics::TableColumn::SEVERE),
        }
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
