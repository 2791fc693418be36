//! Mini-batch training loop, evaluation and the per-run report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::layers::BN_EPSILON;
use crate::model::{Family, InitScheme, Network, NetworkConfig};
use crate::optimizer::{Nadam, OptimizerConfig};
use crate::scalar::Scalar;
use crate::tensor::{SeededRng, RNG_ALGORITHM};

pub const REPORT_FORMAT_VERSION: u32 = 1;
const SHUFFLE_STREAM: u64 = 1;
const EVAL_BATCH: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TrainConfig {
    /// Reference MNIST protocol: 100 epochs, batch 128, lr 0.002, momentum 0.9.
    pub fn mnist(family: Family, depth: usize, seed: u64) -> Self {
        Self {
            network: NetworkConfig::mnist(family, depth, seed),
            optimizer: OptimizerConfig::default(),
            epochs: 100,
            batch_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.optimizer.k_decay > 0.0 && self.network.family != Family::Gresnet {
            return Err(Error::InvalidArgument(format!(
                "k decay needs gate parameters; {} has none",
                self.network.family
            )));
        }
        Ok(())
    }
}

/// Everything that determines a run, with no hidden defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub init_scheme: String,
    pub rng: String,
    pub dtype: String,
    pub bn_epsilon: f64,
    pub first_layer: String,
}

impl ResolvedConfig {
    pub fn new<T: Scalar>(train: TrainConfig) -> Self {
        Self {
            train,
            init_scheme: InitScheme::HeUniform.name(),
            rng: RNG_ALGORITHM.to_string(),
            dtype: T::DTYPE.to_string(),
            bn_epsilon: BN_EPSILON,
            first_layer: "affine".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent of misclassified training samples during the epoch's updates.
    pub train_error: f64,
    pub test_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: ResolvedConfig,
    pub per_epoch: Vec<EpochMetrics>,
    pub final_test_error: f64,
    pub mean_k: Option<f64>,
    pub k_profile: Option<Vec<(usize, f64)>>,
    pub wall_time: f64,
    pub seed: u64,
}

impl RunReport {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other
    }
}

/// Test error in percent, with batch norm in inference mode.
pub fn error_rate<T: Scalar>(net: &Network<T>, ds: &Dataset<T>) -> Result<f64> {
    Ok(100.0 * (1.0 - accuracy(net, ds)?))
}

/// Fraction of correctly classified samples.
pub fn accuracy<T: Scalar>(net: &Network<T>, ds: &Dataset<T>) -> Result<f64> {
    let mut correct = 0usize;
    for idx in batch_indices(ds.len(), EVAL_BATCH, None)? {
        let (x, y) = ds.gather(&idx)?;
        correct += net.predict(&x)?.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Trains a freshly built network. `on_epoch` runs after every epoch with the
/// metrics so far and the current network.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    mut on_epoch: impl FnMut(&EpochMetrics, &Network<T>) -> Result<()>,
) -> Result<(Network<T>, RunReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut net = Network::<T>::build(cfg.network.clone())?;
    let mut opt = Nadam::<T>::new(cfg.optimizer.clone())?;
    let mut shuffle = SeededRng::new(cfg.network.seed).fork(SHUFFLE_STREAM);
    if train_set.features() != cfg.network.in_dim || test_set.features() != cfg.network.in_dim {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} features, network expects {}",
            train_set.features(),
            cfg.network.in_dim
        )));
    }
    // Batch norm needs two samples; reject a trailing batch of one up front.
    if cfg.epochs > 0 && (train_set.len() < 2 || train_set.len() % cfg.batch_size == 1) {
        return Err(Error::InvalidArgument(format!(
            "{} training samples in batches of {} leave a batch of one",
            train_set.len(),
            cfg.batch_size
        )));
    }

    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        for idx in batch_indices(train_set.len(), cfg.batch_size, Some(&mut shuffle))? {
            let (x, y) = train_set.gather(&idx)?;
            let (logits, grads) = net.loss_and_gradients(&x, &y)?;
            let loss = grads.loss.to_f64().unwrap();
            if !loss.is_finite() {
                return Err(Error::NonFinite { param: "loss".into() });
            }
            loss_sum += loss * y.len() as f64;
            wrong += logits.argmax_rows().iter().zip(&y).filter(|(p, l)| p != l).count();
            let mut slots = net.param_slots(&grads)?;
            opt.step(&mut slots)?;
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_error: 100.0 * wrong as f64 / train_set.len() as f64,
            test_error: error_rate(&net, test_set)?,
        };
        on_epoch(&metrics, &net)?;
        per_epoch.push(metrics);
    }

    let final_test_error = match per_epoch.last() {
        Some(m) => m.test_error,
        None => error_rate(&net, test_set)?,
    };
    let gated = net.family() == Family::Gresnet && net.stage_count() > 0;
    let report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        config: ResolvedConfig::new::<T>(cfg.clone()),
        per_epoch,
        final_test_error,
        mean_k: if gated { Some(net.mean_k()?.to_f64().unwrap()) } else { None },
        k_profile: if gated {
            Some(net.k_profile()?.into_iter().map(|(i, k)| (i, k.to_f64().unwrap())).collect())
        } else {
            None
        },
        wall_time: start.elapsed().as_secs_f64(),
        seed: cfg.network.seed,
    };
    Ok((net, report))
}
