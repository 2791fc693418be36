//! Whole-network assembly for the three fully-connected MNIST families.
//!
//! Every family shares the same ends: a bare affine input projection
//! (`in_dim -> width`, with bias) and an affine classifier (`width ->
//! num_classes`, with bias) feeding softmax cross-entropy. Only the middle
//! differs: `depth` Dot-BN-ReLU layers for the classical family, or
//! `depth / 2` two-layer residual blocks (ungated or scalar-gated).

mod checkpoint;
mod init;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use init::{init_distance_report, InitDistanceReport, InitScheme};

use crate::error::{Error, Result};
use crate::layers::{
    softmax_xent_backward, softmax_xent_forward, BlockGrads, BranchCache, Dense, GatedBlock, GatedCache, Mode,
    PlainCache, PlainGrads, PlainLayer, ReluLayer, ReluLayerCache, ResidualBlock, BN_MOMENTUM,
};
use crate::params::{join, ArrayMut, ArrayRef, ParamSlot, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, SeededRng};

pub const MNIST_PIXELS: usize = 784;
pub const MNIST_CLASSES: usize = 10;
pub const DEFAULT_WIDTH: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Classical,
    Resnet,
    Gresnet,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Classical, Family::Resnet, Family::Gresnet];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Classical => "classical",
            Family::Resnet => "resnet",
            Family::Gresnet => "gresnet",
        }
    }

    pub fn has_blocks(self) -> bool {
        !matches!(self, Family::Classical)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical" | "plain" => Ok(Family::Classical),
            "resnet" => Ok(Family::Resnet),
            "gresnet" => Ok(Family::Gresnet),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture `{other}` (expected classical, resnet or gresnet)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub family: Family,
    /// Number of middle layers; block families use `depth / 2` blocks.
    pub depth: usize,
    pub width: usize,
    pub in_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub bn_momentum: f64,
}

impl NetworkConfig {
    /// MNIST defaults: width 50, 784 inputs, 10 classes.
    pub fn mnist(family: Family, depth: usize, seed: u64) -> Self {
        Self {
            family,
            depth,
            width: DEFAULT_WIDTH,
            in_dim: MNIST_PIXELS,
            num_classes: MNIST_CLASSES,
            seed,
            bn_momentum: BN_MOMENTUM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.in_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "width, input size and class count must be positive (got {}, {}, {})",
                self.width, self.in_dim, self.num_classes
            )));
        }
        if self.family.has_blocks() && !self.depth.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "{} needs an even depth, got {}",
                self.family, self.depth
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "batch-norm momentum must lie in (0, 1), got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }

    /// Number of middle stages: layers for classical, blocks otherwise.
    pub fn stage_count(&self) -> usize {
        if self.family.has_blocks() {
            self.depth / 2
        } else {
            self.depth
        }
    }
}

/// One middle stage of a network.
#[derive(Clone, Debug, PartialEq)]
pub enum Middle<T> {
    Plain(PlainLayer<T>),
    Residual(ResidualBlock<T>),
    Gated(GatedBlock<T>),
    /// Dot-ReLU layer without batch norm, produced by identity insertion.
    Relu(ReluLayer<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiddleKind {
    Plain,
    Residual,
    Gated,
    Relu,
}

impl<T: Scalar> Middle<T> {
    pub fn kind(&self) -> MiddleKind {
        match self {
            Middle::Plain(_) => MiddleKind::Plain,
            Middle::Residual(_) => MiddleKind::Residual,
            Middle::Gated(_) => MiddleKind::Gated,
            Middle::Relu(_) => MiddleKind::Relu,
        }
    }

    fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Middle::Plain(l) => l.infer(x),
            Middle::Residual(b) => b.infer(x),
            Middle::Gated(g) => g.infer(x),
            Middle::Relu(l) => l.infer(x),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Middle<T> {
    fn arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayRef<'a, T>>) {
        match self {
            Middle::Plain(l) => l.arrays(prefix, out),
            Middle::Residual(b) => b.arrays(prefix, out),
            Middle::Gated(g) => g.arrays(prefix, out),
            Middle::Relu(l) => l.dense.arrays(prefix, out),
        }
    }

    fn arrays_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ArrayMut<'a, T>>) {
        match self {
            Middle::Plain(l) => l.arrays_mut(prefix, out),
            Middle::Residual(b) => b.arrays_mut(prefix, out),
            Middle::Gated(g) => g.arrays_mut(prefix, out),
            Middle::Relu(l) => l.dense.arrays_mut(prefix, out),
        }
    }
}

#[derive(Clone, Debug)]
enum MiddleCache<T> {
    Plain(PlainCache<T>),
    Residual(BranchCache<T>),
    Gated(GatedCache<T>),
    Relu(ReluLayerCache<T>),
    Removed,
}

/// Intermediates from [`Network::forward`], consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct NetworkCache<T> {
    input: crate::layers::DenseCache<T>,
    middle: Vec<MiddleCache<T>>,
    output: crate::layers::DenseCache<T>,
    logits: Matrix<T>,
}

impl<T> NetworkCache<T> {
    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }
}

/// Gradients of every learnable array, in [`Network::learnable`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub loss: T,
    pub arrays: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    pub input: Dense<T>,
    pub middle: Vec<Middle<T>>,
    /// Stages replaced by the identity (pruned); parameters are kept.
    pub removed: Vec<bool>,
    pub output: Dense<T>,
}

impl<T: Scalar> Network<T> {
    /// Deterministic initialization from `config.seed`: He-uniform weights,
    /// zero biases, gamma 1, beta 0 and every gate `k = 1`.
    pub fn build(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let w = config.width;
        let input = Dense::he_uniform(&mut rng, config.in_dim, w, true);
        let middle: Vec<Middle<T>> = (0..config.stage_count())
            .map(|_| match config.family {
                Family::Classical => Middle::Plain(PlainLayer::init(&mut rng, w, config.bn_momentum)),
                Family::Resnet => Middle::Residual(ResidualBlock::init(&mut rng, w, config.bn_momentum)),
                Family::Gresnet => Middle::Gated(GatedBlock::init(&mut rng, w, config.bn_momentum)),
            })
            .collect();
        let output = Dense::he_uniform(&mut rng, w, config.num_classes, true);
        let removed = vec![false; middle.len()];
        Ok(Self {
            config,
            input,
            middle,
            removed,
            output,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn layout(&self) -> Vec<MiddleKind> {
        self.middle.iter().map(Middle::kind).collect()
    }

    pub fn stage_count(&self) -> usize {
        self.middle.len()
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.config.in_dim {
            return Err(Error::shape("network input", x.shape(), (x.rows(), self.config.in_dim)));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, NetworkCache<T>)> {
        self.check_input(x)?;
        let (mut h, input) = self.input.forward(x)?;
        let mut middle = Vec::with_capacity(self.middle.len());
        for (stage, &removed) in self.middle.iter_mut().zip(&self.removed) {
            if removed {
                middle.push(MiddleCache::Removed);
                continue;
            }
            let (next, cache) = match stage {
                Middle::Plain(l) => {
                    let (y, c) = l.forward(&h, mode)?;
                    (y, MiddleCache::Plain(c))
                }
                Middle::Residual(b) => {
                    let (y, c) = b.forward(&h, mode)?;
                    (y, MiddleCache::Residual(c))
                }
                Middle::Gated(g) => {
                    let (y, c) = g.forward(&h, mode)?;
                    (y, MiddleCache::Gated(c))
                }
                Middle::Relu(l) => {
                    let (y, c) = l.forward(&h)?;
                    (y, MiddleCache::Relu(c))
                }
            };
            h = next;
            middle.push(cache);
        }
        let (logits, output) = self.output.forward(&h)?;
        Ok((
            logits.clone(),
            NetworkCache {
                input,
                middle,
                output,
                logits,
            },
        ))
    }

    /// Inference-mode logits through a shared reference.
    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = self.input.apply(x)?;
        for (stage, &removed) in self.middle.iter().zip(&self.removed) {
            if !removed {
                h = stage.infer(&h)?;
            }
        }
        self.output.apply(&h)
    }

    /// Class index per row (row-argmax, ties to the lowest index).
    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Mean softmax cross-entropy of the cached logits and the gradient of
    /// every learnable array.
    pub fn backward(&self, cache: &NetworkCache<T>, labels: &[usize]) -> Result<Gradients<T>> {
        if cache.middle.len() != self.middle.len() {
            return Err(Error::Cache(format!(
                "cache has {} stages, network has {}",
                cache.middle.len(),
                self.middle.len()
            )));
        }
        let (loss, xent) = softmax_xent_forward(&cache.logits, labels)?;
        let out = self.output.backward(&softmax_xent_backward(&xent), &cache.output)?;
        let mut grad = out.input;

        let mut stage_grads: Vec<StageGrads<T>> = Vec::with_capacity(self.middle.len());
        for (stage, c) in self.middle.iter().zip(&cache.middle).rev() {
            let g = match (stage, c) {
                (_, MiddleCache::Removed) => StageGrads::zeros_like(stage),
                (Middle::Plain(l), MiddleCache::Plain(c)) => {
                    let (gx, g) = l.backward(&grad, c)?;
                    grad = gx;
                    StageGrads::Plain(g)
                }
                (Middle::Residual(b), MiddleCache::Residual(c)) => {
                    let (gx, g) = b.backward(&grad, c)?;
                    grad = gx;
                    StageGrads::Block(g)
                }
                (Middle::Gated(b), MiddleCache::Gated(c)) => {
                    let (gx, g) = b.backward(&grad, c)?;
                    grad = gx;
                    StageGrads::Block(g)
                }
                (Middle::Relu(l), MiddleCache::Relu(c)) => {
                    let (gx, gw) = l.backward(&grad, c)?;
                    grad = gx;
                    StageGrads::Relu(gw)
                }
                _ => return Err(Error::Cache("stage kind differs from its cache".into())),
            };
            stage_grads.push(g);
        }
        stage_grads.reverse();
        let inp = self.input.backward(&grad, &cache.input)?;

        let mut arrays = Vec::new();
        arrays.push(inp.weight.into_vec());
        arrays.extend(inp.bias);
        for g in stage_grads {
            g.flatten_into(&mut arrays);
        }
        arrays.push(out.weight.into_vec());
        arrays.extend(out.bias);
        Ok(Gradients { loss, arrays })
    }

    /// Forward in train mode followed by backward.
    pub fn loss_and_gradients(&mut self, x: &Matrix<T>, labels: &[usize]) -> Result<(Matrix<T>, Gradients<T>)> {
        let (logits, cache) = self.forward(x, Mode::Train)?;
        let grads = self.backward(&cache, labels)?;
        Ok((logits, grads))
    }

    /// Every array (parameters and batch-norm running statistics) in declaration order.
    pub fn arrays(&self) -> Vec<ArrayRef<'_, T>> {
        let mut out = Vec::new();
        self.input.arrays("input", &mut out);
        for (i, m) in self.middle.iter().enumerate() {
            m.arrays(&join("middle", &i.to_string()), &mut out);
        }
        self.output.arrays("output", &mut out);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<ArrayMut<'_, T>> {
        let mut out = Vec::new();
        self.input.arrays_mut("input", &mut out);
        for (i, m) in self.middle.iter_mut().enumerate() {
            m.arrays_mut(&join("middle", &i.to_string()), &mut out);
        }
        self.output.arrays_mut("output", &mut out);
        out
    }

    /// Learnable arrays only, in the order [`Gradients::arrays`] uses.
    pub fn learnable(&self) -> Vec<ArrayRef<'_, T>> {
        self.arrays().into_iter().filter(|a| a.kind.is_learnable()).collect()
    }

    /// Pairs every learnable array with its gradient.
    pub fn param_slots<'a>(&'a mut self, grads: &'a Gradients<T>) -> Result<Vec<ParamSlot<'a, T>>> {
        let params: Vec<_> = self.arrays_mut().into_iter().filter(|a| a.kind.is_learnable()).collect();
        if params.len() != grads.arrays.len() {
            return Err(Error::Cache(format!(
                "{} gradients for {} parameters",
                grads.arrays.len(),
                params.len()
            )));
        }
        params
            .into_iter()
            .zip(&grads.arrays)
            .map(|(p, g)| {
                if p.values.len() != g.len() {
                    return Err(Error::shape("gradient", (1, p.values.len()), (1, g.len())));
                }
                Ok(ParamSlot {
                    name: p.name,
                    kind: p.kind,
                    values: p.values,
                    grad: g.as_slice(),
                })
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|a| a.values.len()).sum()
    }

    /// Appends a Dot-ReLU layer with identity weights after the last middle
    /// layer. Classical networks only: the new layer sees ReLU outputs, so
    /// `relu(x I) = x` leaves the logits unchanged.
    pub fn insert_identity_layer(&self) -> Result<Self> {
        self.insert_relu_layer(ReluLayer::identity(self.config.width))
    }

    /// Like [`Network::insert_identity_layer`] with arbitrary weights.
    pub fn insert_relu_layer(&self, layer: ReluLayer<T>) -> Result<Self> {
        if self.family() != Family::Classical {
            return Err(Error::InvalidArgument(format!(
                "identity insertion needs a classical network, got {}",
                self.family()
            )));
        }
        let w = self.config.width;
        if layer.dense.weight.shape() != (w, w) || layer.dense.bias.is_some() {
            return Err(Error::shape("inserted layer", layer.dense.weight.shape(), (w, w)));
        }
        let mut net = self.clone();
        net.middle.push(Middle::Relu(layer));
        net.removed.push(false);
        Ok(net)
    }

    fn gated_blocks(&self) -> Result<impl Iterator<Item = &GatedBlock<T>>> {
        if self.family() != Family::Gresnet {
            return Err(Error::InvalidArgument(format!(
                "{} network has no gate parameters",
                self.family()
            )));
        }
        Ok(self.middle.iter().filter_map(|m| match m {
            Middle::Gated(g) => Some(g),
            _ => None,
        }))
    }

    /// Arithmetic mean of the raw gate parameters.
    pub fn mean_k(&self) -> Result<T> {
        let ks: Vec<T> = self.gated_blocks()?.map(|g| g.k).collect();
        if ks.is_empty() {
            return Err(Error::InvalidArgument("network has no blocks".into()));
        }
        Ok(ks.iter().copied().sum::<T>() / T::from_usize(ks.len()).unwrap())
    }

    /// `(block_index, k)` with 1-based indices in network order.
    pub fn k_profile(&self) -> Result<Vec<(usize, T)>> {
        Ok(self.gated_blocks()?.enumerate().map(|(i, g)| (i + 1, g.k)).collect())
    }

    /// Overwrites every gate parameter.
    pub fn set_all_k(&mut self, k: T) -> Result<()> {
        let _ = self.gated_blocks()?;
        for m in &mut self.middle {
            if let Middle::Gated(g) = m {
                g.k = k;
            }
        }
        Ok(())
    }

    /// Bitwise equality of every array and the structure.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        if self.layout() != other.layout() || self.removed != other.removed || self.config != other.config {
            return false;
        }
        let (a, b) = (self.arrays(), other.arrays());
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.name == y.name
                    && x.values.len() == y.values.len()
                    && x.values.iter().zip(y.values).all(|(p, q)| p.bits() == q.bits())
            })
    }
}

enum StageGrads<T> {
    Plain(PlainGrads<T>),
    Block(BlockGrads<T>),
    Relu(Matrix<T>),
}

impl<T: Scalar> StageGrads<T> {
    fn zeros_like(stage: &Middle<T>) -> Self {
        let zeros = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        let plain = |l: &PlainLayer<T>| PlainGrads {
            weight: zeros(&l.dense.weight),
            gamma: vec![T::zero(); l.bn.width()],
            beta: vec![T::zero(); l.bn.width()],
        };
        match stage {
            Middle::Plain(l) => StageGrads::Plain(plain(l)),
            Middle::Residual(b) => StageGrads::Block(BlockGrads {
                first: plain(&b.first),
                second: plain(&b.second),
                k: None,
            }),
            Middle::Gated(g) => StageGrads::Block(BlockGrads {
                first: plain(&g.block.first),
                second: plain(&g.block.second),
                k: Some(T::zero()),
            }),
            Middle::Relu(l) => StageGrads::Relu(zeros(&l.dense.weight)),
        }
    }

    fn flatten_into(self, out: &mut Vec<Vec<T>>) {
        match self {
            StageGrads::Plain(g) => g.flatten_into(out),
            StageGrads::Block(g) => g.flatten_into(out),
            StageGrads::Relu(w) => out.push(w.into_vec()),
        }
    }
}
