//! Recurrent neural state-space models and their rollouts.
//!
//! Structured models advance the latent state additively,
//! `x' = f_x(x) + f_u(u) + f_d(d)`; unstructured models use one block on the
//! concatenation, `x' = f([x; u; d])`. Both read outputs through `f_y` and get
//! their initial state from the observer `f_o` applied to the last `N` outputs.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{flatten_window, Activation, Block, BlockConfig, BlockKind, BoundBlock};
use crate::data::TimeSeriesDataset;
use crate::eigen::DynamicsWeight;
use crate::error::{Error, Result};
use crate::linmap::{EigenBounds, Param, WeightKind};
use crate::random::{derive_seed, seeded};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Structured,
    Unstructured,
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Structured => "structured",
            Structure::Unstructured => "unstructured",
        })
    }
}

impl FromStr for Structure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "structured" => Ok(Structure::Structured),
            "unstructured" => Ok(Structure::Unstructured),
            other => Err(Error::Config(format!("unknown structure '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_x: usize,
    pub n_y: usize,
    pub n_u: usize,
    pub n_d: usize,
    /// Observer window length.
    pub horizon: usize,
}

/// Architecture of a [`NeuralSsm`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub structure: Structure,
    pub block: BlockKind,
    pub weights: WeightKind,
    pub activation: Activation,
    pub layers: usize,
    pub width: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub n_u: usize,
    pub n_d: usize,
    pub horizon: usize,
    pub bounds: EigenBounds,
    /// Use a hidden-layer block for `f_y` instead of a single affine map.
    #[serde(default)]
    pub neural_output: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            structure: Structure::Structured,
            block: BlockKind::Mlp,
            weights: WeightKind::Linear,
            activation: Activation::Gelu,
            layers: 2,
            width: 80,
            n_x: 80,
            n_y: 20,
            n_u: 40,
            n_d: 1,
            horizon: 32,
            bounds: EigenBounds::default(),
            neural_output: false,
        }
    }
}

impl ModelSpec {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_x: self.n_x,
            n_y: self.n_y,
            n_u: self.n_u,
            n_d: self.n_d,
            horizon: self.horizon,
        }
    }

    fn block(&self, kind: BlockKind, in_dim: usize, out_dim: usize, weights: WeightKind) -> BlockConfig {
        BlockConfig::new(kind, in_dim, out_dim)
            .with_layers(self.layers, self.width)
            .with_activation(self.activation)
            .with_weights(weights, self.bounds)
    }

    fn output_block(&self) -> BlockConfig {
        if self.neural_output {
            self.block(BlockKind::Mlp, self.n_x, self.n_y, WeightKind::Linear)
        } else {
            BlockConfig::new(BlockKind::Mlp, self.n_x, self.n_y)
                .with_layers(1, self.n_y)
                .with_activation(Activation::Identity)
        }
    }

    fn observer_block(&self) -> BlockConfig {
        self.block(BlockKind::Mlp, self.horizon * self.n_y, self.n_x, WeightKind::Linear)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 || self.horizon == 0 {
            return Err(Error::Config(format!(
                "n_x, n_y and horizon must be positive (n_x={}, n_y={}, N={})",
                self.n_x, self.n_y, self.horizon
            )));
        }
        if self.layers == 0 || self.width == 0 {
            return Err(Error::Config("layers and width must be positive".into()));
        }
        EigenBounds::new(self.bounds.lambda_min, self.bounds.lambda_max)?;
        match self.structure {
            Structure::Structured => self.block(self.block, self.n_x, self.n_x, self.weights).validate()?,
            Structure::Unstructured => {
                self.block(self.block, self.n_x + self.n_u + self.n_d, self.n_x, WeightKind::Linear).validate()?
            }
        }
        self.output_block().validate()?;
        self.observer_block().validate()
    }
}

/// `x' = f_x(x) + f_u(u) + f_d(d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredSsm<T> {
    pub fx: Block<T>,
    pub fu: Option<Block<T>>,
    pub fd: Option<Block<T>>,
    pub fy: Block<T>,
    pub fo: Block<T>,
}

/// `x' = f([x; u; d])`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnstructuredSsm<T> {
    pub f: Block<T>,
    pub fy: Block<T>,
    pub fo: Block<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SsmBody<T> {
    Structured(StructuredSsm<T>),
    Unstructured(UnstructuredSsm<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralSsm<T> {
    pub spec: ModelSpec,
    pub body: SsmBody<T>,
}

impl<T: Scalar> NeuralSsm<T> {
    /// Randomly initialized model; identical `(spec, seed)` give identical parameters.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(derive_seed(seed, "model-init"));
        let body = match spec.structure {
            Structure::Structured => {
                let fx = Block::init("fx", spec.block(spec.block, spec.n_x, spec.n_x, spec.weights), &mut rng)?;
                let fu = (spec.n_u > 0)
                    .then(|| Block::init("fu", spec.block(spec.block, spec.n_u, spec.n_x, WeightKind::Linear), &mut rng))
                    .transpose()?;
                let fd = (spec.n_d > 0)
                    .then(|| Block::init("fd", spec.block(spec.block, spec.n_d, spec.n_x, WeightKind::Linear), &mut rng))
                    .transpose()?;
                let fy = Block::init("fy", spec.output_block(), &mut rng)?;
                let fo = Block::init("fo", spec.observer_block(), &mut rng)?;
                SsmBody::Structured(StructuredSsm { fx, fu, fd, fy, fo })
            }
            Structure::Unstructured => {
                let cfg = spec.block(spec.block, spec.n_x + spec.n_u + spec.n_d, spec.n_x, spec.weights);
                let f = Block::init_pf_where_square("f", cfg, &mut rng)?;
                let fy = Block::init("fy", spec.output_block(), &mut rng)?;
                let fo = Block::init("fo", spec.observer_block(), &mut rng)?;
                SsmBody::Unstructured(UnstructuredSsm { f, fy, fo })
            }
        };
        Ok(Self { spec, body })
    }

    pub fn from_structured(spec: ModelSpec, model: StructuredSsm<T>) -> Self {
        Self {
            spec,
            body: SsmBody::Structured(model),
        }
    }

    pub fn from_unstructured(spec: ModelSpec, model: UnstructuredSsm<T>) -> Self {
        Self {
            spec,
            body: SsmBody::Unstructured(model),
        }
    }

    fn blocks(&self) -> Vec<&Block<T>> {
        match &self.body {
            SsmBody::Structured(m) => {
                let mut v = vec![&m.fx];
                v.extend(m.fu.iter());
                v.extend(m.fd.iter());
                v.extend([&m.fy, &m.fo]);
                v
            }
            SsmBody::Unstructured(m) => vec![&m.f, &m.fy, &m.fo],
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut Block<T>> {
        match &mut self.body {
            SsmBody::Structured(m) => {
                let mut v = vec![&mut m.fx];
                v.extend(m.fu.iter_mut());
                v.extend(m.fd.iter_mut());
                v.push(&mut m.fy);
                v.push(&mut m.fo);
                v
            }
            SsmBody::Unstructured(m) => vec![&mut m.f, &mut m.fy, &mut m.fo],
        }
    }
}

/// One transition of a bound model.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'t, T> {
    pub next: Var<'t, T>,
    /// Additive input contribution `f_u(u)` (structured models only).
    pub fu: Option<Var<'t, T>>,
    /// Additive disturbance contribution `f_d(d)` (structured models only).
    pub fd: Option<Var<'t, T>>,
}

/// A model registered on a tape, carrying any per-rollout state.
pub trait BoundModel<'t, T: Scalar> {
    /// Initial state from flattened past-output windows (`B x N*n_y`).
    /// Starts a new rollout, resetting recurrent state.
    fn observe(&mut self, past_y: Var<'t, T>) -> Result<Var<'t, T>>;
    fn step(&mut self, x: Var<'t, T>, u: Var<'t, T>, d: Var<'t, T>) -> Result<Transition<'t, T>>;
    fn output(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>>;
}

pub trait StateSpaceModel<T: Scalar>: Send + Sync {
    fn dims(&self) -> ModelDims;
    fn is_structured(&self) -> bool;
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    /// Square weight matrices of the state-transition map.
    fn dynamics_weights(&self) -> Vec<DynamicsWeight<T>>;
    fn bind<'s, 't: 's>(&'s self, tape: &'t Tape<T>) -> Result<Box<dyn BoundModel<'t, T> + 's>>;
}

impl<T: Scalar> StateSpaceModel<T> for NeuralSsm<T> {
    fn dims(&self) -> ModelDims {
        self.spec.dims()
    }

    fn is_structured(&self) -> bool {
        matches!(self.body, SsmBody::Structured(_))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.blocks().into_iter().flat_map(Block::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks_mut().into_iter().flat_map(Block::params_mut).collect()
    }

    fn dynamics_weights(&self) -> Vec<DynamicsWeight<T>> {
        let block = match &self.body {
            SsmBody::Structured(m) => &m.fx,
            SsmBody::Unstructured(m) => &m.f,
        };
        block
            .square_weights()
            .into_iter()
            .map(|(label, matrix, bounds)| DynamicsWeight { label, matrix, bounds })
            .collect()
    }

    fn bind<'s, 't: 's>(&'s self, tape: &'t Tape<T>) -> Result<Box<dyn BoundModel<'t, T> + 's>> {
        let bind_opt = |b: &Option<Block<T>>| b.as_ref().map(|b| b.bind(tape)).transpose();
        let kind = match &self.body {
            SsmBody::Structured(m) => BoundBody::Structured {
                fx: m.fx.bind(tape)?,
                fu: bind_opt(&m.fu)?,
                fd: bind_opt(&m.fd)?,
            },
            SsmBody::Unstructured(m) => BoundBody::Unstructured { f: m.f.bind(tape)? },
        };
        let (fy, fo) = match &self.body {
            SsmBody::Structured(m) => (&m.fy, &m.fo),
            SsmBody::Unstructured(m) => (&m.fy, &m.fo),
        };
        Ok(Box::new(BoundSsm {
            tape,
            dims: self.spec.dims(),
            body: kind,
            fy: fy.bind(tape)?,
            fo: fo.bind(tape)?,
        }))
    }
}

enum BoundBody<'t, T> {
    Structured {
        fx: BoundBlock<'t, T>,
        fu: Option<BoundBlock<'t, T>>,
        fd: Option<BoundBlock<'t, T>>,
    },
    Unstructured {
        f: BoundBlock<'t, T>,
    },
}

struct BoundSsm<'t, T> {
    tape: &'t Tape<T>,
    dims: ModelDims,
    body: BoundBody<'t, T>,
    fy: BoundBlock<'t, T>,
    fo: BoundBlock<'t, T>,
}

impl<'t, T: Scalar> BoundModel<'t, T> for BoundSsm<'t, T> {
    fn observe(&mut self, past_y: Var<'t, T>) -> Result<Var<'t, T>> {
        self.fy.reset();
        self.fo.reset();
        match &mut self.body {
            BoundBody::Structured { fx, fu, fd } => {
                fx.reset();
                fu.iter_mut().for_each(BoundBlock::reset);
                fd.iter_mut().for_each(BoundBlock::reset);
            }
            BoundBody::Unstructured { f } => f.reset(),
        }
        self.fo.forward(past_y)
    }

    fn step(&mut self, x: Var<'t, T>, u: Var<'t, T>, d: Var<'t, T>) -> Result<Transition<'t, T>> {
        match &mut self.body {
            BoundBody::Structured { fx, fu, fd } => {
                let mut next = fx.forward(x)?;
                let fu_out = fu.as_mut().map(|b| b.forward(u)).transpose()?;
                let fd_out = fd.as_mut().map(|b| b.forward(d)).transpose()?;
                for c in fu_out.iter().chain(&fd_out) {
                    next = next.add(*c)?;
                }
                Ok(Transition {
                    next,
                    fu: fu_out,
                    fd: fd_out,
                })
            }
            BoundBody::Unstructured { f } => {
                let parts: Vec<_> = [x, u, d].into_iter().filter(|v| v.shape().1 > 0).collect();
                let z = self.tape.concat_cols(&parts)?;
                if z.shape().1 != self.dims.n_x + self.dims.n_u + self.dims.n_d {
                    return Err(Error::shape(
                        "unstructured step input",
                        (x.shape().0, self.dims.n_x + self.dims.n_u + self.dims.n_d),
                        z.shape(),
                    ));
                }
                Ok(Transition {
                    next: f.forward(z)?,
                    fu: None,
                    fd: None,
                })
            }
        }
    }

    fn output(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.fy.forward(x)
    }
}

/// Rollout recorded on a tape. Every entry is `B x dim`.
#[derive(Debug, Clone)]
pub struct RolloutVars<'t, T> {
    /// `y_1 .. y_N`.
    pub y: Vec<Var<'t, T>>,
    /// `x_0 .. x_N`.
    pub states: Vec<Var<'t, T>>,
    pub fu: Option<Vec<Var<'t, T>>>,
    pub fd: Option<Vec<Var<'t, T>>>,
}

/// Batched differentiable rollout.
///
/// `past_y` holds one flattened observer window per row; `u[t]` and `d[t]`
/// are the `B x n_u` and `B x n_d` inputs of step `t`. The number of steps is
/// `u.len()`.
pub fn rollout<'t, T: Scalar, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    tape: &'t Tape<T>,
    past_y: &Array2<T>,
    u: &[Array2<T>],
    d: &[Array2<T>],
) -> Result<RolloutVars<'t, T>> {
    let dims = model.dims();
    let batch = past_y.nrows();
    if past_y.ncols() != dims.horizon * dims.n_y {
        return Err(Error::shape("observer window", (batch, dims.horizon * dims.n_y), past_y.dim()));
    }
    if u.len() != d.len() {
        return Err(Error::shape("rollout horizon", (u.len(), dims.n_u), (d.len(), dims.n_d)));
    }
    for (ut, dt) in u.iter().zip(d) {
        if ut.dim() != (batch, dims.n_u) {
            return Err(Error::shape("rollout input u", (batch, dims.n_u), ut.dim()));
        }
        if dt.dim() != (batch, dims.n_d) {
            return Err(Error::shape("rollout input d", (batch, dims.n_d), dt.dim()));
        }
    }

    let mut bound = model.bind(tape)?;
    let mut x = bound.observe(tape.constant(past_y.clone()))?;
    check_finite(x, 0, "observer state")?;
    let steps = u.len();
    let mut out = RolloutVars {
        y: Vec::with_capacity(steps),
        states: Vec::with_capacity(steps + 1),
        fu: None,
        fd: None,
    };
    out.states.push(x);
    let (mut fu, mut fd) = (Vec::new(), Vec::new());
    let (mut has_fu, mut has_fd) = (true, true);
    for t in 0..steps {
        let tr = bound.step(x, tape.constant(u[t].clone()), tape.constant(d[t].clone()))?;
        x = tr.next;
        check_finite(x, t + 1, "state")?;
        let y = bound.output(x)?;
        check_finite(y, t + 1, "output")?;
        match tr.fu {
            Some(c) => fu.push(c),
            None => has_fu = false,
        }
        match tr.fd {
            Some(c) => fd.push(c),
            None => has_fd = false,
        }
        out.states.push(x);
        out.y.push(y);
    }
    out.fu = has_fu.then_some(fu);
    out.fd = has_fd.then_some(fd);
    Ok(out)
}

fn check_finite<T: Scalar>(v: Var<'_, T>, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow {
            step,
            detail: format!("non-finite {what} in rollout"),
        })
    }
}

/// Values of a single rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult<T> {
    /// `N x n_y`, rows `y_1 .. y_N`.
    pub pred_y: Array2<T>,
    /// `(N+1) x n_x`, rows `x_0 .. x_N`.
    pub states: Array2<T>,
    pub fu_contrib: Option<Array2<T>>,
    pub fd_contrib: Option<Array2<T>>,
}

fn stack_rows<T: Scalar>(vars: &[Var<'_, T>], row: usize, cols: usize) -> Array2<T> {
    let mut m = Array2::zeros((vars.len(), cols));
    for (t, v) in vars.iter().enumerate() {
        m.row_mut(t).assign(&v.value().row(row));
    }
    m
}

impl<T: Scalar> RolloutResult<T> {
    /// Extracts batch row `row` from a recorded rollout.
    pub fn from_vars(vars: &RolloutVars<'_, T>, row: usize) -> Self {
        let n_y = vars.y.first().map_or(0, |v| v.shape().1);
        let n_x = vars.states[0].shape().1;
        Self {
            pred_y: stack_rows(&vars.y, row, n_y),
            states: stack_rows(&vars.states, row, n_x),
            fu_contrib: vars.fu.as_ref().map(|v| stack_rows(v, row, n_x)),
            fd_contrib: vars.fd.as_ref().map(|v| stack_rows(v, row, n_x)),
        }
    }
}

/// Single-window rollout from `past_y` (`N x n_y`) over the rows of `u` and `d`.
pub fn simulate<T: Scalar, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    past_y: &Array2<T>,
    u: &Array2<T>,
    d: &Array2<T>,
) -> Result<RolloutResult<T>> {
    let dims = model.dims();
    if past_y.nrows() != dims.horizon || past_y.ncols() != dims.n_y {
        return Err(Error::shape("observer window", (dims.horizon, dims.n_y), past_y.dim()));
    }
    if u.nrows() != d.nrows() {
        return Err(Error::shape("rollout inputs", u.dim(), d.dim()));
    }
    let tape = Tape::new();
    let us: Vec<_> = u.axis_iter(Axis(0)).map(|r| r.insert_axis(Axis(0)).to_owned()).collect();
    let ds: Vec<_> = d.axis_iter(Axis(0)).map(|r| r.insert_axis(Axis(0)).to_owned()).collect();
    let vars = rollout(model, &tape, &flatten_window(past_y), &us, &ds)?;
    Ok(RolloutResult::from_vars(&vars, 0))
}

/// Predicted and measured outputs over one free-running simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub pred_y: Array2<T>,
    pub ref_y: Array2<T>,
    /// Split-relative index of the first predicted row.
    pub first_step: usize,
}

impl<T: Scalar> Trajectory<T> {
    /// Mean squared error over all time steps and channels.
    pub fn mse(&self) -> T {
        mean_squared_error(&self.pred_y, &self.ref_y)
    }

    /// Mean squared error of each output channel.
    pub fn channel_mse(&self) -> Vec<T> {
        (0..self.pred_y.ncols())
            .map(|c| {
                let n = T::of(self.pred_y.nrows().max(1) as f64);
                self.pred_y
                    .column(c)
                    .iter()
                    .zip(self.ref_y.column(c))
                    .map(|(&p, &r)| (p - r) * (p - r))
                    .sum::<T>()
                    / n
            })
            .collect()
    }

    /// CSV with columns `step, y_pred_1.., y_ref_1..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n_y = self.pred_y.ncols();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["step".to_owned()];
        header.extend((1..=n_y).map(|i| format!("y_pred_{i}")));
        header.extend((1..=n_y).map(|i| format!("y_ref_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for t in 0..self.pred_y.nrows() {
            write!(out, "{}", self.first_step + t)?;
            for v in self.pred_y.row(t).iter().chain(self.ref_y.row(t)) {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn mean_squared_error<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> T {
    let n = T::of(a.len().max(1) as f64);
    a.iter().zip(b.iter()).map(|(&p, &r)| (p - r) * (p - r)).sum::<T>() / n
}

/// One rollout across a whole split: the observer reads the first `N`
/// outputs, then the model runs free on the recorded inputs and is scored on
/// every remaining row.
pub fn open_loop_simulate<T: Scalar, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    split: &TimeSeriesDataset<T>,
) -> Result<Trajectory<T>> {
    let n = model.dims().horizon;
    let len = split.len();
    if len <= n {
        return Err(Error::Data(format!(
            "split of {len} rows is too short for an observer window of {n}"
        )));
    }
    let past = split.y.slice(s![0..n, ..]).to_owned();
    let u = split.u.slice(s![n - 1..len - 1, ..]).to_owned();
    let d = split.d.slice(s![n - 1..len - 1, ..]).to_owned();
    let result = simulate(model, &past, &u, &d)?;
    Ok(Trajectory {
        pred_y: result.pred_y,
        ref_y: split.y.slice(s![n..len, ..]).to_owned(),
        first_step: n,
    })
}
