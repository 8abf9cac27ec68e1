//! Neural blocks: MLP, RNN and ResNet stacks with linear or pf weights.
//!
//! Hidden layers apply the configured activation; the last layer of every
//! block is affine so a block can emit values of either sign. ResNet layers
//! add an identity skip wherever the layer is square; projection layers that
//! change dimension are plain.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linmap::{BoundMap, EigenBounds, Param, WeightKind, WeightMap};
use crate::random::SeededRng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mlp,
    Rnn,
    ResNet,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Mlp => "mlp",
            BlockKind::Rnn => "rnn",
            BlockKind::ResNet => "resnet",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(BlockKind::Mlp),
            "rnn" => Ok(BlockKind::Rnn),
            "resnet" => Ok(BlockKind::ResNet),
            other => Err(Error::Config(format!("unknown block kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<'t, T: Scalar>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
            Activation::Identity => x,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "identity" | "none" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub weight_kind: WeightKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub bounds: EigenBounds,
}

impl BlockConfig {
    /// Two GELU layers of width 80 with linear weights.
    pub fn new(kind: BlockKind, in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind,
            layers: 2,
            width: 80,
            activation: Activation::Gelu,
            weight_kind: WeightKind::Linear,
            in_dim,
            out_dim,
            bounds: EigenBounds::default(),
        }
    }

    pub fn with_layers(mut self, layers: usize, width: usize) -> Self {
        self.layers = layers;
        self.width = width;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_weights(mut self, weight_kind: WeightKind, bounds: EigenBounds) -> Self {
        self.weight_kind = weight_kind;
        self.bounds = bounds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!(
                "block needs positive layers, width and output dimension: {self:?}"
            )));
        }
        let square = self.in_dim == self.out_dim && (self.layers == 1 || self.width == self.in_dim);
        if self.weight_kind == WeightKind::Pf && self.kind != BlockKind::Rnn && !square {
            return Err(Error::Config(format!(
                "pf weights need square layers (in = width = out), got in={} width={} out={}",
                self.in_dim, self.width, self.out_dim
            )));
        }
        Ok(())
    }

    /// `(in, out)` of each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let i = if l == 0 { self.in_dim } else { self.width };
                let o = if l + 1 == self.layers { self.out_dim } else { self.width };
                (i, o)
            })
            .collect()
    }

    fn activation_at(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers {
            Activation::Identity
        } else {
            self.activation
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub name: String,
    pub config: BlockConfig,
    /// Layer maps `W_l`.
    pub layers: Vec<WeightMap<T>>,
    /// Recurrent maps `U_l` (RNN only).
    pub recurrent: Vec<WeightMap<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn init(name: &str, config: BlockConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        Self::build(name, config, false, rng)
    }

    /// Like [`Block::init`], but pf weights go only on square layer maps;
    /// dimension-changing layers fall back to linear weights.
    pub fn init_pf_where_square(name: &str, config: BlockConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut relaxed = config;
        relaxed.weight_kind = WeightKind::Linear;
        relaxed.validate()?;
        Self::build(name, config, true, rng)
    }

    fn build(name: &str, config: BlockConfig, lenient: bool, rng: &mut SeededRng) -> Result<Self> {
        let mut layers = Vec::with_capacity(config.layers);
        let mut recurrent = Vec::new();
        for (l, (i, o)) in config.layer_dims().into_iter().enumerate() {
            let input_kind = match config.kind {
                BlockKind::Rnn => WeightKind::Linear,
                _ if lenient && i != o => WeightKind::Linear,
                _ => config.weight_kind,
            };
            layers.push(WeightMap::init(input_kind, &format!("{name}.layer{l}"), i, o, config.bounds, rng)?);
            if config.kind == BlockKind::Rnn {
                recurrent.push(WeightMap::init(
                    config.weight_kind,
                    &format!("{name}.recurrent{l}"),
                    o,
                    o,
                    config.bounds,
                    rng,
                )?);
            }
        }
        Ok(Self {
            name: name.to_owned(),
            config,
            layers,
            recurrent,
        })
    }

    /// Assembles a block from explicit maps, checking them against `config`.
    pub fn from_maps(
        name: &str,
        config: BlockConfig,
        layers: Vec<WeightMap<T>>,
        recurrent: Vec<WeightMap<T>>,
    ) -> Result<Self> {
        if config.layers == 0 || config.out_dim == 0 {
            return Err(Error::Config("block needs at least one layer".into()));
        }
        let dims = config.layer_dims();
        if layers.len() != dims.len() {
            return Err(Error::Config(format!("expected {} layers, got {}", dims.len(), layers.len())));
        }
        for (m, (i, o)) in layers.iter().zip(&dims) {
            if (m.in_dim(), m.out_dim()) != (*i, *o) {
                return Err(Error::shape("block layer", (*o, *i), (m.out_dim(), m.in_dim())));
            }
        }
        let want_recurrent = if config.kind == BlockKind::Rnn { dims.len() } else { 0 };
        if recurrent.len() != want_recurrent {
            return Err(Error::Config(format!(
                "expected {want_recurrent} recurrent maps, got {}",
                recurrent.len()
            )));
        }
        for (u, (_, o)) in recurrent.iter().zip(&dims) {
            if (u.in_dim(), u.out_dim()) != (*o, *o) {
                return Err(Error::shape("recurrent map", (*o, *o), (u.out_dim(), u.in_dim())));
            }
        }
        Ok(Self {
            name: name.to_owned(),
            config,
            layers,
            recurrent,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.config.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn is_stateful(&self) -> bool {
        self.config.kind == BlockKind::Rnn
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers
            .iter()
            .chain(&self.recurrent)
            .flat_map(WeightMap::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .chain(self.recurrent.iter_mut())
            .flat_map(WeightMap::params_mut)
            .collect()
    }

    /// Square weights governing the block's dynamics, labelled by layer:
    /// the recurrent maps of an RNN, otherwise every square layer map.
    pub fn square_weights(&self) -> Vec<(String, Array2<T>, Option<EigenBounds>)> {
        let (maps, tag) = match self.config.kind {
            BlockKind::Rnn => (&self.recurrent, "recurrent"),
            _ => (&self.layers, "layer"),
        };
        maps.iter()
            .enumerate()
            .filter(|(_, m)| m.in_dim() == m.out_dim())
            .map(|(l, m)| (format!("{}.{tag}{l}", self.name), m.effective_weight(), m.bounds()))
            .collect()
    }

    /// Registers the block on `tape`. RNN hidden state starts unset.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Result<BoundBlock<'t, T>> {
        let layers = self.layers.iter().map(|m| m.bind(tape)).collect::<Result<Vec<_>>>()?;
        let recurrent = self.recurrent.iter().map(|m| m.bind(tape)).collect::<Result<Vec<_>>>()?;
        Ok(BoundBlock {
            config: self.config,
            name: self.name.clone(),
            layers,
            recurrent,
            hidden: Hidden::Unset,
        })
    }

    /// Row-batched forward pass on a fresh tape; RNN blocks start from zero state.
    pub fn forward_values(&self, z: &Array2<T>) -> Result<Array2<T>> {
        let tape = Tape::new();
        let mut bound = self.bind(&tape)?;
        bound.reset();
        let out = bound.forward(tape.constant(z.clone()))?;
        Ok(out.to_array())
    }
}

/// Flattens a past-output window `[y_{1-N}; ...; y_0]` into one observer input row.
pub fn flatten_window<T: Scalar>(past_y: &Array2<T>) -> Array2<T> {
    let n = past_y.len();
    past_y
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((1, n))
        .expect("contiguous")
}

/// Initial latent state from a window of `N` past outputs.
pub fn observer_forward<T: Scalar>(fo: &Block<T>, past_y: &Array2<T>, horizon: usize) -> Result<Array1<T>> {
    if past_y.nrows() != horizon || past_y.len() != fo.in_dim() {
        return Err(Error::shape(
            "observer window",
            (horizon, fo.in_dim() / horizon.max(1)),
            past_y.dim(),
        ));
    }
    let out = fo.forward_values(&flatten_window(past_y))?;
    Ok(out.index_axis(Axis(0), 0).to_owned())
}

#[derive(Debug, Clone)]
enum Hidden<'t, T> {
    Unset,
    Zero,
    Live(Vec<Var<'t, T>>),
}

/// A block registered on a tape. Holds the per-rollout RNN hidden state.
#[derive(Debug, Clone)]
pub struct BoundBlock<'t, T> {
    config: BlockConfig,
    name: String,
    layers: Vec<BoundMap<'t, T>>,
    recurrent: Vec<BoundMap<'t, T>>,
    hidden: Hidden<'t, T>,
}

impl<'t, T: Scalar> BoundBlock<'t, T> {
    /// Zeroes RNN hidden state; no-op for stateless blocks.
    pub fn reset(&mut self) {
        self.hidden = Hidden::Zero;
    }

    pub fn forward(&mut self, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let (batch, dim) = z.shape();
        if dim != self.config.in_dim {
            return Err(Error::shape(
                "block input",
                (batch, self.config.in_dim),
                (batch, dim),
            ));
        }
        match self.config.kind {
            BlockKind::Mlp => {
                let mut h = z;
                for (l, map) in self.layers.iter().enumerate() {
                    h = self.config.activation_at(l).apply(map.apply(h)?);
                }
                Ok(h)
            }
            BlockKind::ResNet => {
                let mut h = z;
                for (l, map) in self.layers.iter().enumerate() {
                    let branch = self.config.activation_at(l).apply(map.apply(h)?);
                    h = if branch.shape() == h.shape() { h.add(branch)? } else { branch };
                }
                Ok(h)
            }
            BlockKind::Rnn => self.forward_rnn(z),
        }
    }

    fn forward_rnn(&mut self, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = z.tape();
        let batch = z.shape().0;
        let previous: Vec<Var<'t, T>> = match &self.hidden {
            Hidden::Unset => {
                return Err(Error::State(format!(
                    "rnn block '{}' used before reset",
                    self.name
                )))
            }
            Hidden::Zero => self
                .config
                .layer_dims()
                .iter()
                .map(|&(_, o)| tape.constant(Array2::zeros((batch, o))))
                .collect(),
            Hidden::Live(h) => h.clone(),
        };
        let mut next = Vec::with_capacity(self.layers.len());
        let mut input = z;
        for (l, (w, u)) in self.layers.iter().zip(&self.recurrent).enumerate() {
            if previous[l].shape().0 != batch {
                return Err(Error::State(format!(
                    "rnn block '{}' hidden batch {} differs from input batch {batch}",
                    self.name,
                    previous[l].shape().0
                )));
            }
            let pre = w.apply(input)?.add(u.apply(previous[l])?)?;
            let h = self.config.activation_at(l).apply(pre);
            next.push(h);
            input = h;
        }
        self.hidden = Hidden::Live(next);
        Ok(input)
    }
}
