//! Training, evaluation, checkpointing and grid sweeps.

mod adam;
mod checkpoint;
mod sweep;

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::blocks::{Activation, BlockKind};
use crate::constraints::{multi_term_loss, LossBreakdown, LossWeights, PenaltyBounds};
use crate::data::{
    denormalize_channel_mse, make_windows, split_even, ChannelGroup, Minibatch, NormalizationStats,
    TimeSeriesDataset, WindowBatch,
};
use crate::eigen::analyze_model;
use crate::error::{Error, Result};
use crate::linmap::{EigenBounds, WeightKind};
use crate::random::{derive_seed, seeded};
use crate::scalar::Scalar;
use crate::ssm::{open_loop_simulate, rollout, ModelSpec, StateSpaceModel, Structure};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointManifest, ParamEntry, MANIFEST, NORM_FILE};
pub use sweep::{default_grid, run_cell, sweep, write_sweep_csv, GridCell, SweepOptions, SweepResult};

/// Horizons of the default experiment grid.
pub const GRID_HORIZONS: [usize; 4] = [8, 16, 32, 64];

/// Every training setting, with flat keys for JSON config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub horizon: usize,
    /// Training window stride; `0` means the horizon.
    pub stride: usize,
    pub structure: Structure,
    pub block: BlockKind,
    pub weights: WeightKind,
    pub activation: Activation,
    pub layers: usize,
    pub width: usize,
    pub n_x: usize,
    pub neural_output: bool,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub q_dx: f64,
    pub q_ineq_y: f64,
    pub q_ineq_u: f64,
    pub q_ineq_d: f64,
    pub y_lower: f64,
    pub y_upper: f64,
    pub fu_cap: f64,
    pub fd_cap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let q = LossWeights::default();
        let b = EigenBounds::default();
        Self {
            learning_rate: 0.003,
            steps: 5000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            eval_every: 250,
            seed: 0,
            horizon: 32,
            stride: 0,
            structure: Structure::Structured,
            block: BlockKind::Mlp,
            weights: WeightKind::Linear,
            activation: Activation::Gelu,
            layers: 2,
            width: 80,
            n_x: 80,
            neural_output: false,
            lambda_min: b.lambda_min,
            lambda_max: b.lambda_max,
            q_dx: q.q_dx,
            q_ineq_y: q.q_ineq_y,
            q_ineq_u: q.q_ineq_u,
            q_ineq_d: q.q_ineq_d,
            y_lower: -0.05,
            y_upper: 1.05,
            fu_cap: 0.05,
            fd_cap: 0.05,
        }
    }
}

impl TrainConfig {
    /// Checks every field; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "steps, batch_size, eval_every and horizon must be at least 1".into(),
            ));
        }
        self.loss_weights().validate()?;
        EigenBounds::new(self.lambda_min, self.lambda_max)?;
        PenaltyBounds::<f64>::uniform(1, 1, self.y_lower, self.y_upper, self.fu_cap.min(self.fd_cap))?;
        let mut warnings = Vec::new();
        if !GRID_HORIZONS.contains(&self.horizon) {
            warnings.push(format!(
                "horizon {} is outside the default grid {:?}",
                self.horizon, GRID_HORIZONS
            ));
        }
        Ok(warnings)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            q_dx: self.q_dx,
            q_ineq_y: self.q_ineq_y,
            q_ineq_u: self.q_ineq_u,
            q_ineq_d: self.q_ineq_d,
        }
    }

    pub fn bounds(&self) -> EigenBounds {
        EigenBounds {
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
        }
    }

    pub fn penalty_bounds<T: Scalar>(&self, n_y: usize, n_x: usize) -> Result<PenaltyBounds<T>> {
        let mut b = PenaltyBounds::uniform(n_y, n_x, self.y_lower, self.y_upper, self.fu_cap)?;
        b.fd_cap.fill(T::of(self.fd_cap));
        Ok(b)
    }

    pub fn train_stride(&self) -> usize {
        if self.stride == 0 {
            self.horizon
        } else {
            self.stride
        }
    }

    pub fn model_spec(&self, n_y: usize, n_u: usize, n_d: usize) -> ModelSpec {
        ModelSpec {
            structure: self.structure,
            block: self.block,
            weights: self.weights,
            activation: self.activation,
            layers: self.layers,
            width: self.width,
            n_x: self.n_x,
            n_y,
            n_u,
            n_d,
            horizon: self.horizon,
            bounds: self.bounds(),
            neural_output: self.neural_output,
        }
    }
}

/// Chronological splits normalized with train-split statistics.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub train: TimeSeriesDataset<T>,
    pub dev: TimeSeriesDataset<T>,
    pub test: TimeSeriesDataset<T>,
    pub stats: NormalizationStats<T>,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(raw: &TimeSeriesDataset<T>, horizon: usize) -> Result<Self> {
        let splits = split_even(raw, horizon)?;
        let stats = NormalizationStats::fit(&splits.train)?;
        Ok(Self {
            train: stats.apply(&splits.train)?,
            dev: stats.apply(&splits.dev)?,
            test: stats.apply(&splits.test)?,
            stats,
        })
    }

    pub fn split(&self, name: &str) -> Result<&TimeSeriesDataset<T>> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split '{other}' (train, dev, test)"))),
        }
    }
}

/// One optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown<f64>,
}

/// One dev evaluation during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub dev_open_loop_mse: f64,
    pub max_spectral_radius: Option<f64>,
    /// Whether every bounded dynamics weight met its eigenvalue bounds.
    pub bounds_ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainingLog {
    /// `step,total,mse,smoothness,slack_y,slack_u,slack_d,dev_open_loop_mse,spectral_radius,bounds_ok`;
    /// evaluation columns are filled on evaluation steps only.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            out,
            "step,total,mse,smoothness,slack_y,slack_u,slack_d,dev_open_loop_mse,spectral_radius,bounds_ok"
        )?;
        let last = self.steps.last().map_or(0, |s| s.step);
        let mut evals = self.evals.iter().peekable();
        for step in 0..=last {
            let rec = self.steps.iter().find(|s| s.step == step);
            let ev = evals.next_if(|e| e.step == step);
            if rec.is_none() && ev.is_none() {
                continue;
            }
            match rec {
                Some(r) => {
                    let l = r.loss;
                    write!(
                        out,
                        "{step},{:e},{:e},{:e},{:e},{:e},{:e}",
                        l.total, l.mse, l.smoothness, l.slack_y, l.slack_u, l.slack_d
                    )?
                }
                None => write!(out, "{step},,,,,,")?,
            }
            match ev {
                Some(e) => writeln!(
                    out,
                    ",{:e},{},{}",
                    e.dev_open_loop_mse,
                    e.max_spectral_radius.map_or(String::new(), |r| format!("{r:e}")),
                    e.bounds_ok
                )?,
                None => writeln!(out, ",,,")?,
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_step: usize,
    pub best_dev_mse: f64,
    pub log: TrainingLog,
}

impl TrainOutcome {
    /// True when every evaluation met the eigenvalue bounds.
    pub fn bounds_held(&self) -> bool {
        self.log.evals.iter().all(|e| e.bounds_ok)
    }
}

fn snapshot<T: Scalar, M: StateSpaceModel<T> + ?Sized>(model: &M) -> Vec<Array2<T>> {
    model.params().iter().map(|p| p.value.clone()).collect()
}

fn restore<T: Scalar, M: StateSpaceModel<T> + ?Sized>(model: &mut M, values: &[Array2<T>]) {
    for (p, v) in model.params_mut().into_iter().zip(values) {
        p.value.clone_from(v);
    }
}

fn dev_evaluation<T: Scalar, M: StateSpaceModel<T> + ?Sized>(model: &M, dev: &TimeSeriesDataset<T>, step: usize) -> Result<EvalRecord> {
    let traj = open_loop_simulate(model, dev)?;
    let report = analyze_model(model, T::of(0.8))?;
    Ok(EvalRecord {
        step,
        dev_open_loop_mse: traj.mse().to_f64_lossy(),
        max_spectral_radius: report.max_radius().map(|r| r.to_f64_lossy()),
        bounds_ok: report.bounds_satisfied(),
    })
}

/// Trains `model` in place and leaves it at the parameters with the lowest
/// dev open-loop MSE seen at any evaluation (including before the first update).
pub fn train<T: Scalar, M: StateSpaceModel<T> + ?Sized>(
    model: &mut M,
    data: &Prepared<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    for w in cfg.validate()? {
        warn!("{w}");
    }
    let dims = model.dims();
    if dims.horizon != cfg.horizon {
        return Err(Error::Config(format!(
            "model observer window {} differs from training horizon {}",
            dims.horizon, cfg.horizon
        )));
    }
    let windows = make_windows(&data.train, cfg.horizon, cfg.train_stride())?;
    let bounds = cfg.penalty_bounds::<T>(dims.n_y, dims.n_x)?;
    let q = cfg.loss_weights();
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)?;
    let mut rng = seeded(derive_seed(cfg.seed, "minibatch-order"));

    let mut log = TrainingLog::default();
    let first = dev_evaluation(model, &data.dev, 0)?;
    let mut best = (first.dev_open_loop_mse, 0usize, snapshot(model));
    log.evals.push(first);

    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch = cfg.batch_size.min(windows.len());
    for step in 1..=cfg.steps {
        let mut picked: Vec<&WindowBatch<T>> = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&windows[order[cursor]]);
            cursor += 1;
        }
        let mb = Minibatch::stack(&picked)?;

        let tape = Tape::new();
        let (loss, breakdown) = {
            let r = rollout(&*model, &tape, &mb.past_y, &mb.u, &mb.d).map_err(|e| annotate(e, step))?;
            multi_term_loss(&tape, &mb.ref_y, &r, &bounds, &q)?
        };
        let record = StepRecord {
            step,
            loss: LossBreakdown {
                total: breakdown.total.to_f64_lossy(),
                mse: breakdown.mse.to_f64_lossy(),
                smoothness: breakdown.smoothness.to_f64_lossy(),
                slack_y: breakdown.slack_y.to_f64_lossy(),
                slack_u: breakdown.slack_u.to_f64_lossy(),
                slack_d: breakdown.slack_d.to_f64_lossy(),
                contributions_available: breakdown.contributions_available,
            },
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NumericOverflow {
                step,
                detail: format!("non-finite loss {:?}", record.loss),
            });
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        log.steps.push(record);

        let zeros: Vec<Array2<T>>;
        let mut params = model.params_mut();
        zeros = params.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        let gs: Vec<&Array2<T>> = params
            .iter()
            .zip(&zeros)
            .map(|(p, z)| grads.named(&p.name).unwrap_or(z))
            .collect();
        adam.step(&mut params, &gs).map_err(|e| annotate(e, step))?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let ev = dev_evaluation(model, &data.dev, step)?;
            info!(
                "step {step}: loss {:.4e}, dev open-loop mse {:.4e}",
                record.loss.total, ev.dev_open_loop_mse
            );
            if ev.dev_open_loop_mse < best.0 {
                best = (ev.dev_open_loop_mse, step, snapshot(model));
            }
            log.evals.push(ev);
        }
    }
    restore(model, &best.2);
    Ok(TrainOutcome {
        best_step: best.1,
        best_dev_mse: best.0,
        log,
    })
}

fn annotate(err: Error, step: usize) -> Error {
    match err {
        Error::NumericOverflow { detail, .. } => Error::NumericOverflow {
            step,
            detail: format!("training step {step}: {detail}"),
        },
        other => other,
    }
}

/// Normalized and Kelvin errors on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean over re-anchored `N`-step windows, normalized units.
    pub n_step_mse: f64,
    /// Single free run over the split, normalized units.
    pub open_loop_mse: f64,
    pub n_step_mse_k2: f64,
    pub open_loop_mse_k2: f64,
    pub n_step_rmse_k: f64,
    pub open_loop_rmse_k: f64,
}

/// Scores `model` on a normalized split.
pub fn evaluate<T: Scalar, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    split: &TimeSeriesDataset<T>,
    stats: &NormalizationStats<T>,
) -> Result<Evaluation> {
    let n = model.dims().horizon;
    let n_y = model.dims().n_y;
    let windows = make_windows(split, n, n)?;
    let refs: Vec<&WindowBatch<T>> = windows.iter().collect();
    let mb = Minibatch::stack(&refs)?;
    let tape = Tape::new();
    let r = rollout(model, &tape, &mb.past_y, &mb.u, &mb.d)?;
    let mut per_channel = vec![T::zero(); n_y];
    for (y, target) in r.y.iter().zip(&mb.ref_y) {
        let y = y.value();
        for ((r, c), &p) in y.indexed_iter() {
            let e = p - target[[r, c]];
            per_channel[c] += e * e;
        }
    }
    let count = T::of((windows.len() * n) as f64);
    per_channel.iter_mut().for_each(|v| *v = *v / count);
    let n_step = per_channel.iter().copied().sum::<T>() / T::of(n_y as f64);
    let (n_step_k2, n_step_rmse) = denormalize_channel_mse(&per_channel, stats, ChannelGroup::Y)?;

    let traj = open_loop_simulate(model, split)?;
    let (ol_k2, ol_rmse) = denormalize_channel_mse(&traj.channel_mse(), stats, ChannelGroup::Y)?;
    Ok(Evaluation {
        n_step_mse: n_step.to_f64_lossy(),
        open_loop_mse: traj.mse().to_f64_lossy(),
        n_step_mse_k2: n_step_k2.to_f64_lossy(),
        open_loop_mse_k2: ol_k2.to_f64_lossy(),
        n_step_rmse_k: n_step_rmse.to_f64_lossy(),
        open_loop_rmse_k: ol_rmse.to_f64_lossy(),
    })
}

#[cfg(test)]
mod tests;
