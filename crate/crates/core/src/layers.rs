//! Forward and backward passes for the layer primitives: dense, batch
//! normalization, ReLU, Dot-BN-ReLU, residual and scalar-gated residual
//! blocks, and the softmax cross-entropy head.
//!
//! Every `forward` returns the output together with a cache; the matching
//! `backward` consumes that cache. Parameters are only mutated by the
//! optimizer, except for batch-norm running statistics which train-mode
//! forward updates in place.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, ArrayKind, ArrayMut, ArrayRef, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{draw_uniform, Matrix, SeededRng};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Scalar ReLU gate applied to the residual branch.
pub fn gate<T: Scalar>(k: T) -> T {
    if k > T::zero() {
        k
    } else {
        T::zero()
    }
}

/// Subgradient of [`gate`]; zero at `k == 0`.
pub fn gate_grad<T: Scalar>(k: T) -> T {
    if k > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    input: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Matrix<T>,
    pub weight: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Matrix<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(Error::shape("dense bias", weight.shape(), (1, b.len())));
            }
        }
        Ok(Self { weight, bias })
    }

    /// He-style uniform init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    pub fn he_uniform(rng: &mut SeededRng, in_dim: usize, out_dim: usize, with_bias: bool) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let weight = draw_uniform(rng, in_dim, out_dim, -limit, limit).expect("positive limit");
        Self {
            weight,
            bias: with_bias.then(|| vec![T::zero(); out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Forward pass without keeping a cache.
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y.add_row_broadcast(b)?;
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, DenseCache<T>)> {
        let y = self.apply(x)?;
        Ok((y, DenseCache { input: x.clone() }))
    }

    pub fn backward(&self, grad_out: &Matrix<T>, cache: &DenseCache<T>) -> Result<DenseGrads<T>> {
        if cache.input.cols() != self.in_dim() || cache.input.rows() != grad_out.rows() {
            return Err(Error::Cache(format!(
                "dense cache holds {}x{} input for a {}x{} layer and {}-row gradient",
                cache.input.rows(),
                cache.input.cols(),
                self.in_dim(),
                self.out_dim(),
                grad_out.rows()
            )));
        }
        if grad_out.cols() != self.out_dim() {
            return Err(Error::shape("dense backward", grad_out.shape(), self.weight.shape()));
        }
        Ok(DenseGrads {
            input: grad_out.matmul_t(&self.weight)?,
            weight: cache.input.t_matmul(grad_out)?,
            bias: self.bias.as_ref().map(|_| grad_out.column_sums()),
        })
    }
}

impl<T: Scalar> Parameterized<T> for Dense<T> {
    fn arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayRef<'a, T>>) {
        out.push(ArrayRef {
            name: join(prefix, "weight"),
            kind: ArrayKind::Weight,
            shape: self.weight.shape(),
            values: self.weight.as_slice(),
        });
        if let Some(b) = &self.bias {
            out.push(ArrayRef {
                name: join(prefix, "bias"),
                kind: ArrayKind::Bias,
                shape: (1, b.len()),
                values: b,
            });
        }
    }

    fn arrays_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ArrayMut<'a, T>>) {
        let shape = self.weight.shape();
        out.push(ArrayMut {
            name: join(prefix, "weight"),
            kind: ArrayKind::Weight,
            shape,
            values: self.weight.as_mut_slice(),
        });
        if let Some(b) = &mut self.bias {
            out.push(ArrayMut {
                name: join(prefix, "bias"),
                kind: ArrayKind::Bias,
                shape: (1, b.len()),
                values: b,
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    normalized: Matrix<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Matrix<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    /// gamma = 1, beta = 0, running mean 0 and running variance 1.
    pub fn new(width: usize, momentum: f64) -> Self {
        Self {
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
            momentum: T::lit(momentum),
            epsilon: T::lit(BN_EPSILON),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, BnCache<T>)> {
        let width = self.width();
        if x.cols() != width {
            return Err(Error::shape("batch norm", x.shape(), (1, width)));
        }
        let n = x.rows();
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "train-mode batch norm needs at least 2 samples, got {n}"
                    )));
                }
                let count = T::from_usize(n).unwrap();
                let mean: Vec<T> = x.column_sums().into_iter().map(|s| s / count).collect();
                let mut var = vec![T::zero(); width];
                for r in 0..n {
                    for ((v, &xv), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        let d = xv - m;
                        *v += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let keep = self.momentum;
                let blend = T::one() - keep;
                for j in 0..width {
                    self.running_mean[j] = keep * self.running_mean[j] + blend * mean[j];
                    self.running_var[j] = keep * self.running_var[j] + blend * var[j];
                }
                (mean, var)
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone()),
        };

        let (out, normalized, inv_std) = self.normalize(x, &mean, &var);
        Ok((
            out,
            BnCache {
                normalized,
                inv_std,
                mode,
            },
        ))
    }

    /// Inference-mode output using the running statistics.
    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.width() {
            return Err(Error::shape("batch norm", x.shape(), (1, self.width())));
        }
        Ok(self.normalize(x, &self.running_mean, &self.running_var).0)
    }

    fn normalize(&self, x: &Matrix<T>, mean: &[T], var: &[T]) -> (Matrix<T>, Matrix<T>, Vec<T>) {
        let (n, width) = x.shape();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.epsilon).sqrt()).collect();
        let mut normalized = Matrix::zeros(n, width);
        let mut out = Matrix::zeros(n, width);
        for r in 0..n {
            let xr = x.row(r);
            let nr = normalized.row_mut(r);
            for j in 0..width {
                nr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let or = out.row_mut(r);
            let nr = normalized.row(r);
            for j in 0..width {
                or[j] = self.gamma[j] * nr[j] + self.beta[j];
            }
        }
        (out, normalized, inv_std)
    }

    pub fn backward(&self, grad_out: &Matrix<T>, cache: &BnCache<T>) -> Result<BnGrads<T>> {
        if cache.mode != Mode::Train {
            return Err(Error::Cache("batch norm backward needs a train-mode cache".into()));
        }
        if grad_out.shape() != cache.normalized.shape() {
            return Err(Error::Cache(format!(
                "batch norm cache is {}x{}, gradient is {}x{}",
                cache.normalized.rows(),
                cache.normalized.cols(),
                grad_out.rows(),
                grad_out.cols()
            )));
        }
        let (n, width) = grad_out.shape();
        let beta_grad = grad_out.column_sums();
        let mut gamma_grad = vec![T::zero(); width];
        for r in 0..n {
            for ((g, &dy), &xh) in gamma_grad.iter_mut().zip(grad_out.row(r)).zip(cache.normalized.row(r)) {
                *g += dy * xh;
            }
        }
        let count = T::from_usize(n).unwrap();
        let coef: Vec<T> = (0..width)
            .map(|j| self.gamma[j] * cache.inv_std[j] / count)
            .collect();
        let mut input = Matrix::zeros(n, width);
        for r in 0..n {
            let dy = grad_out.row(r);
            let xh = cache.normalized.row(r);
            let dx = input.row_mut(r);
            for j in 0..width {
                dx[j] = coef[j] * (count * dy[j] - beta_grad[j] - xh[j] * gamma_grad[j]);
            }
        }
        Ok(BnGrads {
            input,
            gamma: gamma_grad,
            beta: beta_grad,
        })
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm<T> {
    fn arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayRef<'a, T>>) {
        let w = self.width();
        for (name, kind, values) in [
            ("gamma", ArrayKind::BnScale, &self.gamma),
            ("beta", ArrayKind::BnShift, &self.beta),
            ("running_mean", ArrayKind::RunningMean, &self.running_mean),
            ("running_var", ArrayKind::RunningVar, &self.running_var),
        ] {
            out.push(ArrayRef {
                name: join(prefix, name),
                kind,
                shape: (1, w),
                values,
            });
        }
    }

    fn arrays_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ArrayMut<'a, T>>) {
        let w = self.width();
        for (name, kind, values) in [
            ("gamma", ArrayKind::BnScale, &mut self.gamma),
            ("beta", ArrayKind::BnShift, &mut self.beta),
            ("running_mean", ArrayKind::RunningMean, &mut self.running_mean),
            ("running_var", ArrayKind::RunningVar, &mut self.running_var),
        ] {
            out.push(ArrayMut {
                name: join(prefix, name),
                kind,
                shape: (1, w),
                values,
            });
        }
    }
}

// ---------------------------------------------------------------------------
// ReLU

#[derive(Clone, Debug)]
pub struct ReluCache {
    active: Vec<bool>,
    shape: (usize, usize),
}

pub fn relu_forward<T: Scalar>(x: &Matrix<T>) -> (Matrix<T>, ReluCache) {
    let active = x.as_slice().iter().map(|&v| v > T::zero()).collect();
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (y, ReluCache { active, shape: x.shape() })
}

pub fn relu_backward<T: Scalar>(grad_out: &Matrix<T>, cache: &ReluCache) -> Result<Matrix<T>> {
    if grad_out.shape() != cache.shape {
        return Err(Error::shape("relu backward", grad_out.shape(), cache.shape));
    }
    let data = grad_out
        .as_slice()
        .iter()
        .zip(&cache.active)
        .map(|(&g, &on)| if on { g } else { T::zero() })
        .collect();
    Matrix::from_vec(cache.shape.0, cache.shape.1, data)
}

// ---------------------------------------------------------------------------
// Dot-BN-ReLU

/// Bias-free dense layer followed by batch normalization and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainLayer<T> {
    pub dense: Dense<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Clone, Debug)]
pub struct PlainCache<T> {
    dense: DenseCache<T>,
    bn: BnCache<T>,
    relu: ReluCache,
}

/// Parameter gradients of a [`PlainLayer`].
#[derive(Clone, Debug)]
pub struct PlainGrads<T> {
    pub weight: Matrix<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> PlainGrads<T> {
    pub(crate) fn flatten_into(self, out: &mut Vec<Vec<T>>) {
        out.push(self.weight.into_vec());
        out.push(self.gamma);
        out.push(self.beta);
    }
}

impl<T: Scalar> PlainLayer<T> {
    pub fn init(rng: &mut SeededRng, width: usize, bn_momentum: f64) -> Self {
        Self {
            dense: Dense::he_uniform(rng, width, width, false),
            bn: BatchNorm::new(width, bn_momentum),
        }
    }

    pub fn width(&self) -> usize {
        self.dense.out_dim()
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, PlainCache<T>)> {
        let (z, dense) = self.dense.forward(x)?;
        let (h, bn) = self.bn.forward(&z, mode)?;
        let (y, relu) = relu_forward(&h);
        Ok((y, PlainCache { dense, bn, relu }))
    }

    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let z = self.dense.apply(x)?;
        Ok(relu_forward(&self.bn.infer(&z)?).0)
    }

    pub fn backward(&self, grad_out: &Matrix<T>, cache: &PlainCache<T>) -> Result<(Matrix<T>, PlainGrads<T>)> {
        let gh = relu_backward(grad_out, &cache.relu)?;
        let bn = self.bn.backward(&gh, &cache.bn)?;
        let dense = self.dense.backward(&bn.input, &cache.dense)?;
        Ok((
            dense.input,
            PlainGrads {
                weight: dense.weight,
                gamma: bn.gamma,
                beta: bn.beta,
            },
        ))
    }

    fn zero_grads(&self) -> PlainGrads<T> {
        let (r, c) = self.dense.weight.shape();
        PlainGrads {
            weight: Matrix::zeros(r, c),
            gamma: vec![T::zero(); self.bn.width()],
            beta: vec![T::zero(); self.bn.width()],
        }
    }
}

impl<T: Scalar> Parameterized<T> for PlainLayer<T> {
    fn arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayRef<'a, T>>) {
        self.dense.arrays(prefix, out);
        self.bn.arrays(&join(prefix, "bn"), out);
    }

    fn arrays_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ArrayMut<'a, T>>) {
        self.dense.arrays_mut(prefix, out);
        self.bn.arrays_mut(&join(prefix, "bn"), out);
    }
}

// ---------------------------------------------------------------------------
// Dot-ReLU (no batch norm), used for identity insertion

#[derive(Clone, Debug, PartialEq)]
pub struct ReluLayer<T> {
    pub dense: Dense<T>,
}

#[derive(Clone, Debug)]
pub struct ReluLayerCache<T> {
    dense: DenseCache<T>,
    relu: ReluCache,
}

impl<T: Scalar> ReluLayer<T> {
    pub fn identity(width: usize) -> Self {
        Self {
            dense: Dense {
                weight: Matrix::identity(width),
                bias: None,
            },
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, ReluLayerCache<T>)> {
        let (z, dense) = self.dense.forward(x)?;
        let (y, relu) = relu_forward(&z);
        Ok((y, ReluLayerCache { dense, relu }))
    }

    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(relu_forward(&self.dense.apply(x)?).0)
    }

    pub fn backward(&self, grad_out: &Matrix<T>, cache: &ReluLayerCache<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let gz = relu_backward(grad_out, &cache.relu)?;
        let g = self.dense.backward(&gz, &cache.dense)?;
        Ok((g.input, g.weight))
    }
}

// ---------------------------------------------------------------------------
// Residual blocks

/// Two Dot-BN-ReLU layers sharing one identity shortcut: `u = f(x) + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub first: PlainLayer<T>,
    pub second: PlainLayer<T>,
}

#[derive(Clone, Debug)]
pub struct BranchCache<T> {
    first: PlainCache<T>,
    second: PlainCache<T>,
}

/// Parameter gradients of a block; `k` is present for gated blocks only.
#[derive(Clone, Debug)]
pub struct BlockGrads<T> {
    pub first: PlainGrads<T>,
    pub second: PlainGrads<T>,
    pub k: Option<T>,
}

impl<T: Scalar> BlockGrads<T> {
    pub(crate) fn flatten_into(self, out: &mut Vec<Vec<T>>) {
        self.first.flatten_into(out);
        self.second.flatten_into(out);
        if let Some(k) = self.k {
            out.push(vec![k]);
        }
    }
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn init(rng: &mut SeededRng, width: usize, bn_momentum: f64) -> Self {
        let first = PlainLayer::init(rng, width, bn_momentum);
        let second = PlainLayer::init(rng, width, bn_momentum);
        Self { first, second }
    }

    pub fn width(&self) -> usize {
        self.first.width()
    }

    /// The residual branch alone.
    pub fn branch(&mut self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, BranchCache<T>)> {
        if x.cols() != self.width() {
            return Err(Error::shape("residual block", x.shape(), (x.rows(), self.width())));
        }
        let (h, first) = self.first.forward(x, mode)?;
        let (f, second) = self.second.forward(&h, mode)?;
        Ok((f, BranchCache { first, second }))
    }

    pub fn branch_infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.width() {
            return Err(Error::shape("residual block", x.shape(), (x.rows(), self.width())));
        }
        self.second.infer(&self.first.infer(x)?)
    }

    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut u = self.branch_infer(x)?;
        u.add_assign(x)?;
        Ok(u)
    }

    /// Backward through the branch; returns the branch input gradient.
    pub fn branch_backward(&self, grad_f: &Matrix<T>, cache: &BranchCache<T>) -> Result<(Matrix<T>, BlockGrads<T>)> {
        let (gh, second) = self.second.backward(grad_f, &cache.second)?;
        let (gx, first) = self.first.backward(&gh, &cache.first)?;
        Ok((gx, BlockGrads { first, second, k: None }))
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, BranchCache<T>)> {
        let (mut u, cache) = self.branch(x, mode)?;
        u.add_assign(x)?;
        Ok((u, cache))
    }

    pub fn backward(&self, grad_out: &Matrix<T>, cache: &BranchCache<T>) -> Result<(Matrix<T>, BlockGrads<T>)> {
        let (mut gx, grads) = self.branch_backward(grad_out, cache)?;
        gx.add_assign(grad_out)?;
        Ok((gx, grads))
    }

    fn zero_grads(&self, with_k: bool) -> BlockGrads<T> {
        BlockGrads {
            first: self.first.zero_grads(),
            second: self.second.zero_grads(),
            k: with_k.then(T::zero),
        }
    }
}

impl<T: Scalar> Parameterized<T> for ResidualBlock<T> {
    fn arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayRef<'a, T>>) {
        self.first.arrays(&join(prefix, "first"), out);
        self.second.arrays(&join(prefix, "second"), out);
    }

    fn arrays_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ArrayMut<'a, T>>) {
        self.first.arrays_mut(&join(prefix, "first"), out);
        self.second.arrays_mut(&join(prefix, "second"), out);
    }
}

/// Residual block whose branch is scaled by `gate(k)`: `u = gate(k) f(x) + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedBlock<T> {
    pub block: ResidualBlock<T>,
    pub k: T,
}

#[derive(Clone, Debug)]
pub struct GatedCache<T> {
    gate: T,
    k: T,
    /// Branch output and its cache; absent when the gate was closed in infer mode.
    branch: Option<(Matrix<T>, BranchCache<T>)>,
    rows: usize,
}

impl<T: Scalar> GatedBlock<T> {
    pub fn init(rng: &mut SeededRng, width: usize, bn_momentum: f64) -> Self {
        Self {
            block: ResidualBlock::init(rng, width, bn_momentum),
            k: T::one(),
        }
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, GatedCache<T>)> {
        let width = self.block.width();
        if x.cols() != width {
            return Err(Error::shape("gated block", x.shape(), (x.rows(), width)));
        }
        let g = gate(self.k);
        // A closed gate is an exact identity. In train mode the branch still
        // runs so batch-norm statistics stay current should the gate reopen.
        if g == T::zero() && mode == Mode::Infer {
            let cache = GatedCache {
                gate: g,
                k: self.k,
                branch: None,
                rows: x.rows(),
            };
            return Ok((x.clone(), cache));
        }
        let (f, branch) = self.block.branch(x, mode)?;
        let u = if g == T::zero() {
            x.clone()
        } else {
            let mut u = f.scale(g);
            u.add_assign(x)?;
            u
        };
        Ok((
            u,
            GatedCache {
                gate: g,
                k: self.k,
                branch: Some((f, branch)),
                rows: x.rows(),
            },
        ))
    }

    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let g = gate(self.k);
        if g == T::zero() {
            if x.cols() != self.block.width() {
                return Err(Error::shape("gated block", x.shape(), (x.rows(), self.block.width())));
            }
            return Ok(x.clone());
        }
        let mut u = self.block.branch_infer(x)?.scale(g);
        u.add_assign(x)?;
        Ok(u)
    }

    pub fn backward(&self, grad_out: &Matrix<T>, cache: &GatedCache<T>) -> Result<(Matrix<T>, BlockGrads<T>)> {
        if grad_out.rows() != cache.rows || grad_out.cols() != self.block.width() {
            return Err(Error::Cache(format!(
                "gated block cache has {} rows, gradient is {}x{}",
                cache.rows,
                grad_out.rows(),
                grad_out.cols()
            )));
        }
        if cache.k.bits() != self.k.bits() {
            return Err(Error::Cache("gate parameter changed since forward".into()));
        }
        if cache.gate == T::zero() {
            return Ok((grad_out.clone(), self.block.zero_grads(true)));
        }
        let (f, branch) = cache
            .branch
            .as_ref()
            .ok_or_else(|| Error::Cache("open gate without a branch cache".into()))?;
        let grad_k = gate_grad(self.k) * grad_out.mul(f)?.sum();
        let scaled = grad_out.scale(cache.gate);
        let (mut gx, mut grads) = self.block.branch_backward(&scaled, branch)?;
        gx.add_assign(grad_out)?;
        grads.k = Some(grad_k);
        Ok((gx, grads))
    }
}

impl<T: Scalar> Parameterized<T> for GatedBlock<T> {
    fn arrays<'a>(&'a self, prefix: &str, out: &mut Vec<ArrayRef<'a, T>>) {
        self.block.arrays(prefix, out);
        out.push(ArrayRef {
            name: join(prefix, "k"),
            kind: ArrayKind::Gate,
            shape: (1, 1),
            values: std::slice::from_ref(&self.k),
        });
    }

    fn arrays_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ArrayMut<'a, T>>) {
        self.block.arrays_mut(prefix, out);
        out.push(ArrayMut {
            name: join(prefix, "k"),
            kind: ArrayKind::Gate,
            shape: (1, 1),
            values: std::slice::from_mut(&mut self.k),
        });
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

#[derive(Clone, Debug)]
pub struct XentCache<T> {
    probs: Matrix<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> XentCache<T> {
    pub fn probabilities(&self) -> &Matrix<T> {
        &self.probs
    }
}

/// Mean cross-entropy of a row-wise softmax against class indices.
pub fn softmax_xent_forward<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, XentCache<T>)> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = Matrix::zeros(n, classes);
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let pr = probs.row_mut(r);
        let mut denom = T::zero();
        for (p, &z) in pr.iter_mut().zip(row) {
            *p = (z - max).exp();
            denom += *p;
        }
        pr.iter_mut().for_each(|p| *p /= denom);
        total += denom.ln() - (row[label] - max);
    }
    let loss = total / T::from_usize(n).unwrap();
    Ok((
        loss,
        XentCache {
            probs,
            labels: labels.to_vec(),
        },
    ))
}

/// `(softmax - onehot) / batch_size`.
pub fn softmax_xent_backward<T: Scalar>(cache: &XentCache<T>) -> Matrix<T> {
    let n = T::from_usize(cache.probs.rows()).unwrap();
    let mut grad = cache.probs.clone();
    for (r, &label) in cache.labels.iter().enumerate() {
        let row = grad.row_mut(r);
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v /= n);
    }
    grad
}
