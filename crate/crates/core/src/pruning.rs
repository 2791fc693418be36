//! Whole-block removal: greedy by gate value, or in a seeded random order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Family, Network};
use crate::scalar::Scalar;
use crate::tensor::SeededRng;
use crate::train::accuracy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    GreedyK,
    Random,
}

impl PruneStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneStrategy::GreedyK => "greedy_k",
            PruneStrategy::Random => "random",
        }
    }
}

impl fmt::Display for PruneStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PruneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" | "greedy_k" => Ok(PruneStrategy::GreedyK),
            "random" => Ok(PruneStrategy::Random),
            other => Err(Error::InvalidArgument(format!("unknown pruning strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub strategy: PruneStrategy,
    /// 0-based block indices in the order they were removed.
    pub removal_order: Vec<usize>,
    /// `(blocks removed, test accuracy %)`, starting at 0 removed.
    pub accuracy_curve: Vec<(usize, f64)>,
    /// Permutation seed; absent for the greedy strategy.
    pub seed: Option<u64>,
}

fn require_blocks<T: Scalar>(net: &Network<T>) -> Result<()> {
    if !net.family().has_blocks() {
        return Err(Error::InvalidArgument(format!(
            "block removal needs a residual network, got {}",
            net.family()
        )));
    }
    Ok(())
}

/// Copy of `net` with block `index` (0-based) replaced by the identity.
pub fn remove_block<T: Scalar>(net: &Network<T>, index: usize) -> Result<Network<T>> {
    require_blocks(net)?;
    if index >= net.stage_count() {
        return Err(Error::InvalidArgument(format!(
            "block {index} out of range for {} blocks",
            net.stage_count()
        )));
    }
    let mut out = net.clone();
    out.removed[index] = true;
    Ok(out)
}

/// Ascending-k order; ties keep ascending block index.
pub fn greedy_order<T: Scalar>(net: &Network<T>) -> Result<Vec<usize>> {
    if net.family() != Family::Gresnet {
        return Err(Error::InvalidArgument(format!(
            "greedy pruning ranks blocks by k; {} has none",
            net.family()
        )));
    }
    let mut profile = net.k_profile()?;
    profile.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite k"));
    Ok(profile.into_iter().map(|(i, _)| i - 1).collect())
}

/// Removes blocks one at a time in `order`, evaluating accuracy (in percent)
/// before the first removal and after every removal.
pub fn curve_for_order<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, order: &[usize]) -> Result<Vec<(usize, f64)>> {
    require_blocks(net)?;
    let mut current = net.clone();
    let mut curve = Vec::with_capacity(order.len() + 1);
    curve.push((0, 100.0 * accuracy(&current, ds)?));
    for (n, &idx) in order.iter().enumerate() {
        current = remove_block(&current, idx)?;
        curve.push((n + 1, 100.0 * accuracy(&current, ds)?));
    }
    Ok(curve)
}

pub fn prune_curve<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset<T>,
    strategy: PruneStrategy,
    rng: &mut SeededRng,
) -> Result<PruneReport> {
    require_blocks(net)?;
    let (order, seed) = match strategy {
        PruneStrategy::GreedyK => (greedy_order(net)?, None),
        PruneStrategy::Random => (rng.permutation(net.stage_count()), Some(rng.seed())),
    };
    let accuracy_curve = curve_for_order(net, ds, &order)?;
    Ok(PruneReport {
        strategy,
        removal_order: order,
        accuracy_curve,
        seed,
    })
}

/// One random-order report per seed.
pub fn random_curves<T: Scalar>(net: &Network<T>, ds: &Dataset<T>, seeds: &[u64]) -> Result<Vec<PruneReport>> {
    seeds
        .iter()
        .map(|&s| prune_curve(net, ds, PruneStrategy::Random, &mut SeededRng::new(s)))
        .collect()
}

/// Point-wise mean accuracy over reports of equal length.
pub fn mean_curve(reports: &[PruneReport]) -> Result<Vec<(usize, f64)>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no curves to average".into()))?;
    let len = first.accuracy_curve.len();
    if reports.iter().any(|r| r.accuracy_curve.len() != len) {
        return Err(Error::InvalidArgument("curves have different lengths".into()));
    }
    Ok((0..len)
        .map(|i| {
            let sum: f64 = reports.iter().map(|r| r.accuracy_curve[i].1).sum();
            (first.accuracy_curve[i].0, sum / reports.len() as f64)
        })
        .collect())
}

/// Trapezoidal area under an accuracy curve, with unit spacing per removal.
pub fn area_under_curve(curve: &[(usize, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 * (w[0].1 + w[1].1) / 2.0)
        .sum()
}
