//! Scalar-gated residual networks ("GResNets") for fully-connected MNIST
//! models, built on a small hand-written dense-matrix core.
//!
//! A gated block computes `u = g(k) f(x) + x`, where `f` is two
//! Dot-BN-ReLU layers and `g(k) = max(k, 0)` is a ReLU on one learnable
//! scalar. Driving `k` to zero or below turns the block into an exact
//! identity, which is what makes whole-block pruning cheap.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the experiments use.

pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod optimizer;
pub mod params;
pub mod pruning;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layers::{gate, gate_grad, Mode};
pub use model::{Family, InitScheme, NetworkConfig};
pub use optimizer::OptimizerConfig;
pub use pruning::{PruneReport, PruneStrategy};
pub use scalar::Scalar;
pub use tensor::{ElementwiseOp, SeededRng};
pub use train::{RunReport, TrainConfig};

pub type Matrix = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Network = model::Network<f64>;
pub type Network32 = model::Network<f32>;
pub type Dataset = data::Dataset<f64>;
pub type Nadam = optimizer::Nadam<f64>;
pub type Dense = layers::Dense<f64>;
pub type BatchNorm = layers::BatchNorm<f64>;
pub type ResidualBlock = layers::ResidualBlock<f64>;
pub type GatedBlock = layers::GatedBlock<f64>;
