use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, Prepared, TrainConfig, GRID_HORIZONS};
use crate::blocks::BlockKind;
use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::linmap::WeightKind;
use crate::ssm::{NeuralSsm, Structure};

/// One configuration of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub structure: Structure,
    pub block: BlockKind,
    pub horizon: usize,
    /// Perron-Frobenius weights with penalties, versus linear weights without.
    pub constrained: bool,
}

impl GridCell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.structure = self.structure;
        cfg.block = self.block;
        cfg.horizon = self.horizon;
        if self.constrained {
            cfg.weights = WeightKind::Pf;
        } else {
            cfg.weights = WeightKind::Linear;
            cfg.q_ineq_y = 0.0;
            cfg.q_ineq_u = 0.0;
            cfg.q_ineq_d = 0.0;
        }
        cfg
    }

    pub fn label(&self) -> String {
        format!(
            "{}-{}-n{}-{}",
            self.structure,
            self.block,
            self.horizon,
            if self.constrained { "constrained" } else { "unconstrained" }
        )
    }
}

/// 2 structures x 3 blocks x 4 horizons x {constrained, unconstrained}.
pub fn default_grid() -> Vec<GridCell> {
    let mut cells = Vec::with_capacity(48);
    for structure in [Structure::Structured, Structure::Unstructured] {
        for block in [BlockKind::Mlp, BlockKind::ResNet, BlockKind::Rnn] {
            for horizon in GRID_HORIZONS {
                for constrained in [true, false] {
                    cells.push(GridCell {
                        structure,
                        block,
                        horizon,
                        constrained,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub cells: Vec<GridCell>,
    pub seeds: Vec<u64>,
    /// Worker threads; `0` uses all cores.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cell: GridCell,
    pub seed: u64,
    pub best_step: Option<usize>,
    pub dev_open_loop_mse: Option<f64>,
    pub test_open_loop_mse: Option<f64>,
    pub test_n_step_mse: Option<f64>,
    pub test_open_loop_rmse_k: Option<f64>,
    pub bounds_held: Option<bool>,
    pub error: Option<String>,
}

/// Trains and scores one cell with one seed.
pub fn run_cell(raw: &TimeSeriesDataset<f64>, base: &TrainConfig, cell: GridCell, seed: u64) -> Result<SweepResult> {
    let mut cfg = cell.apply(base);
    cfg.seed = seed;
    let data = Prepared::new(raw, cfg.horizon)?;
    let spec = cfg.model_spec(raw.y.ncols(), raw.u.ncols(), raw.d.ncols());
    let mut model = NeuralSsm::<f64>::init(spec, seed)?;
    let outcome = train(&mut model, &data, &cfg)?;
    let eval = evaluate(&model, &data.test, &data.stats)?;
    Ok(SweepResult {
        cell,
        seed,
        best_step: Some(outcome.best_step),
        dev_open_loop_mse: Some(outcome.best_dev_mse),
        test_open_loop_mse: Some(eval.open_loop_mse),
        test_n_step_mse: Some(eval.n_step_mse),
        test_open_loop_rmse_k: Some(eval.open_loop_rmse_k),
        bounds_held: Some(outcome.bounds_held()),
        error: None,
    })
}

/// Runs every cell/seed pair in parallel. A failing run is recorded with its
/// error and does not stop the others.
pub fn sweep(raw: &TimeSeriesDataset<f64>, base: &TrainConfig, opts: &SweepOptions) -> Result<Vec<SweepResult>> {
    if opts.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let jobs: Vec<(GridCell, u64)> = opts
        .cells
        .iter()
        .flat_map(|c| opts.seeds.iter().map(move |s| (*c, *s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&(cell, seed)| {
                run_cell(raw, base, cell, seed).unwrap_or_else(|e| {
                    log::warn!("{} seed {seed} failed: {e}", cell.label());
                    SweepResult {
                        cell,
                        seed,
                        best_step: None,
                        dev_open_loop_mse: None,
                        test_open_loop_mse: None,
                        test_n_step_mse: None,
                        test_open_loop_rmse_k: None,
                        bounds_held: None,
                        error: Some(e.to_string()),
                    }
                })
            })
            .collect()
    }))
}

pub fn write_sweep_csv(results: &[SweepResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "structure",
        "block",
        "horizon",
        "constrained",
        "seed",
        "best_step",
        "dev_open_loop_mse",
        "test_open_loop_mse",
        "test_n_step_mse",
        "test_open_loop_rmse_k",
        "bounds_held",
        "error",
    ])?;
    fn opt<V: ToString>(v: Option<V>) -> String {
        v.map_or(String::new(), |v| v.to_string())
    }
    for r in results {
        w.write_record([
            r.cell.structure.to_string(),
            r.cell.block.to_string(),
            r.cell.horizon.to_string(),
            r.cell.constrained.to_string(),
            r.seed.to_string(),
            opt(r.best_step),
            opt(r.dev_open_loop_mse),
            opt(r.test_open_loop_mse),
            opt(r.test_n_step_mse),
            opt(r.test_open_loop_rmse_k),
            opt(r.bounds_held),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
